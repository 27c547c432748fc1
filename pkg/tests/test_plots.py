import xml.etree.ElementTree as ET

import numpy as np

from samba import plots

NS = "{http://www.w3.org/2000/svg}"


def test_line_plot_is_valid_svg(tmp_path):
    x = np.arange(10)
    y = np.sin(x).astype(float)
    y[3] = np.nan
    path = plots.line_plot({"a<b": (x, y), "c": (x, np.cos(x))}, tmp_path / "l.svg", title="t & u")
    root = ET.parse(path).getroot()
    assert root.tag == f"{NS}svg"
    lines = root.findall(f"{NS}polyline")
    assert len(lines) == 2 and len(lines[0].get("points").split()) == 9
    assert any(t.text == "a<b" for t in root.iter(f"{NS}text"))


def test_line_plot_degenerate_ranges(tmp_path):
    ET.parse(plots.line_plot({"flat": ([1], [2.0])}, tmp_path / "f.svg"))
    ET.parse(plots.line_plot({}, tmp_path / "e.svg"))


def test_heatmap_cells_and_tooltips(tmp_path):
    m = np.arange(6.0).reshape(2, 3)
    root = ET.parse(plots.heatmap(m, tmp_path / "h.svg", row_labels=["r0", "r1"])).getroot()
    cells = [r for r in root.findall(f"{NS}rect") if r.find(f"{NS}title") is not None]
    assert len(cells) == 6
    assert [c.find(f"{NS}title").text for c in cells] == ["0", "1", "2", "3", "4", "5"]
    ET.parse(plots.heatmap(np.ones((1, 1)), tmp_path / "c.svg"))
