"""Command-line entry point: ``samba <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
import types
import typing
from pathlib import Path

import numpy as np

from . import plots
from . import synth as sy
from .errors import ConfigError, DataError, SambaError
from .evaluation import (DEFAULT_GRID, EVAL_WINDOWS_S, EvalReport, OracleTranslator, evaluate, predict_range,
                         run_ablations, score_streams, write_ablation_table)
from .hrf import THETA_NAMES
from .model import ModelConfig, SambaModel
from .training import (TrainConfig, geometry_of, hemo_graph_from, load_checkpoint, save_checkpoint,
                       split_windows, train)

log = logging.getLogger("samba")

RUN_MANIFEST = "run.json"


@dataclasses.dataclass
class EvalConfig:
    windows_s: list[float] = dataclasses.field(default_factory=lambda: list(EVAL_WINDOWS_S))
    split: str = "test"
    classification: bool = True

    def __post_init__(self):
        if self.split not in sy.SPLITS:
            raise ConfigError(f"eval.split must be one of {sorted(sy.SPLITS)}")
        if not self.windows_s or min(self.windows_s) <= 0:
            raise ConfigError("eval.windows_s must be a non-empty list of positive seconds")


SECTIONS = {"synth": sy.SynthConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


# -- configuration ---------------------------------------------------------------

def _type_ok(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if hint is typing.Any:
        return True
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if origin in (list, tuple):
        args = typing.get_args(hint)
        if not isinstance(value, (list, tuple)):
            return False
        if origin is tuple and args and args[-1] is not Ellipsis:
            return len(value) == len(args) and all(_type_ok(v, a) for v, a in zip(value, args))
        return all(_type_ok(v, args[0]) for v in value) if args else True
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(hint, type):
        return isinstance(value, hint)
    return True


def _build_section(name: str, values: dict):
    cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - fields)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
    for k, v in values.items():
        if not _type_ok(v, hints[k]):
            raise ConfigError(f"{name}.{k}: value {v!r} does not match type {hints[k]}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    """Validated config objects keyed by section; missing sections take their defaults."""
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}; expected {sorted(SECTIONS)}")
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            raw.setdefault(section, {})[key] = value
    return {name: _build_section(name, raw.get(name, {})) for name in SECTIONS}


def config_dict(cfg: dict) -> dict:
    return {k: dataclasses.asdict(v) for k, v in cfg.items()}


# -- run manifests ----------------------------------------------------------------

def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _data_checksum(root: str) -> str:
    return sy.read_manifest(root)["checksum"]


def input_hash(command: str, config: dict, inputs: dict) -> str:
    blob = json.dumps({"command": command, "config": config, "inputs": inputs}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


class Run:
    """Output directory guard plus manifest writer.

    Dataset-producing commands fold the run record into the dataset's
    ``manifest.json``; everything else writes ``run.json``.
    """

    def __init__(self, args, command: str, config: dict, inputs: dict, dataset_dir: bool = False,
                 allow_existing: bool = False):
        self.out = Path(args.out)
        self.command = command
        self.dataset_dir = dataset_dir
        self.record = {
            "command": command,
            "config_path": getattr(args, "config", None),
            "seed": getattr(args, "seed", None),
            "input_hash": input_hash(command, config, inputs),
            "inputs": inputs,
            "config": config,
            "output_dir": str(self.out),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        self.up_to_date = False
        if self.out.exists() and any(self.out.iterdir()):
            previous = self._previous()
            if previous and previous.get("input_hash") == self.record["input_hash"] and \
                    previous.get("status") == "complete" and not args.force:
                self.up_to_date = True
            elif not (args.force or allow_existing):
                raise ConfigError(f"output directory {self.out} is not empty; pass --force to overwrite")
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def manifest_path(self) -> Path:
        return self.out / ("manifest.json" if self.dataset_dir else RUN_MANIFEST)

    def _previous(self) -> dict | None:
        path = self.manifest_path
        if not path.exists():
            return None
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError:
            return None
        return data.get("run") if self.dataset_dir else data

    def finish(self, **extra) -> dict:
        self.record.update(extra, status="complete", finished=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
        if self.dataset_dir:
            data = json.loads(self.manifest_path.read_text())
            data["run"] = self.record
            self.manifest_path.write_text(json.dumps(data, indent=2, sort_keys=True))
        else:
            if (self.out / "manifest.json").exists():
                raise ConfigError(f"{self.out} already holds a dataset manifest")
            self.manifest_path.write_text(json.dumps(self.record, indent=2, sort_keys=True, default=str))
        return self.record


def write_csv(path: Path, rows: list[dict], fields: list[str] | None = None) -> Path:
    fields = fields or list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


def _threads() -> int:
    raw = os.environ.get("SAMBA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SAMBA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("SAMBA_THREADS must be >= 1")
    return n


def _ckpt_input(path: str) -> dict:
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} does not exist")
    return {"ckpt": _sha256_file(Path(path))}


def _load_model(path: str) -> tuple[SambaModel, TrainConfig, dict]:
    result, cfg, header = load_checkpoint(path)
    return result.model, cfg, header


def _check_geometry(model: SambaModel, ds: sy.PairedDataset) -> None:
    geom = geometry_of(ds)
    if dataclasses.asdict(geom) != dataclasses.asdict(model.geometry):
        raise ConfigError(f"checkpoint geometry {dataclasses.asdict(model.geometry)} does not match the dataset "
                          f"{dataclasses.asdict(geom)}")
    if ds.region_map.to_dict() != model.rmap.to_dict():
        raise ConfigError("checkpoint region map does not match the dataset's parcel-to-region assignment")


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, {("synth", "seed"): args.seed})
    run = Run(args, "gen-data", config_dict({"synth": cfg["synth"]}), {}, dataset_dir=True)
    if run.up_to_date:
        print(f"{run.out}: up to date")
        return 0
    ds = sy.generate(cfg["synth"], threads=_threads())
    sy.save(ds, run.out)
    run.finish(checksum=ds.checksum())
    print(f"wrote {len(ds.recordings)} subjects to {run.out} (checksum {ds.checksum()[:12]})")
    return 0


def _history_svg(history: list[dict], path: Path, title: str) -> None:
    ep = [h["epoch"] for h in history]
    series = {k: (ep, [h[k] for h in history]) for k in ("L_match", "L_reg", "total")
              if any(np.isfinite(h[k]) for h in history)}
    plots.line_plot(series, path, title=title, xlabel="epoch", ylabel="loss")


def cmd_train(args) -> int:
    over = {("train", "direction"): args.direction, ("train", "seed"): args.seed}
    if args.epochs is not None and not args.resume:
        over[("train", "epochs")] = args.epochs
    cfg = load_config(args.config, over)
    data_sum = _data_checksum(args.data)
    inputs = {"data": data_sum}
    resume = None
    if args.resume:
        inputs["resume"] = _ckpt_input(args.resume)["ckpt"]
    same_dir = bool(args.resume) and Path(args.resume).resolve().parent == Path(args.out).resolve()
    run = Run(args, "train", config_dict({k: cfg[k] for k in ("model", "train")}) | {"epochs": args.epochs},
              inputs, allow_existing=same_dir)
    if run.up_to_date:
        print(f"{run.out}: up to date")
        return 0
    ds = sy.load(args.data)
    tcfg, mcfg = cfg["train"], cfg["model"]
    if args.resume:
        resume, tcfg, header = load_checkpoint(args.resume)
        mcfg = resume.model.config
        if args.direction and args.direction != header["direction"]:
            raise ConfigError(f"--direction {args.direction} does not match the checkpoint ({header['direction']})")
        if header["dataset_checksum"] not in (None, data_sum):
            raise ConfigError("checkpoint was trained on a different dataset")
        _check_geometry(resume.model, ds)
    try:
        split_windows(ds, resume.model if resume else _probe_model(ds, mcfg, tcfg), "train", tcfg.stride_s)
    except DataError as exc:
        raise ConfigError(f"dataset cannot supply {tcfg.direction} training windows: {exc}") from exc
    extra = args.epochs if args.resume else None
    if args.resume and extra is None:
        extra = max(0, tcfg.epochs - resume.epoch)
    result = train(ds, mcfg, tcfg, resume=resume, epochs=extra)
    ckpt = save_checkpoint(run.out / "checkpoint.smba", result, tcfg, dataset_checksum=data_sum)
    write_csv(run.out / "history.csv", result.history,
              ["epoch", "L_match", "L_reg", "total", "teacher_forcing", "val_spearman"])
    if args.plots:
        _history_svg(result.history, run.out / "history.svg", f"{tcfg.direction} training losses")
    run.finish(checkpoint=ckpt.name, epoch=result.epoch)
    last = result.history[-1] if result.history else {}
    print(f"trained {tcfg.direction} to epoch {result.epoch}; final total {last.get('total', float('nan')):.5f}")
    return 0


def _probe_model(ds, mcfg, tcfg):
    """A throwaway model, only used for window geometry."""
    return types.SimpleNamespace(n_steps=int(round(mcfg.window_s / ds.config.tr)),
                                 n_context=int(round(mcfg.context_s / ds.config.tr)),
                                 spr=ds.config.samples_per_tr, config=mcfg)


def _prediction_dataset(model, ds: sy.PairedDataset) -> tuple[sy.PairedDataset, dict]:
    recs, covered = [], {}
    n_hemo = ds.config.n_hemo
    for rec in ds.recordings:
        pred, _, first = predict_range(model, ds, rec.subject_id, 0, n_hemo)
        if model.direction == "e2h":
            hemo = np.zeros_like(rec.hemo)
            hemo[:, first:] = pred
            electro = rec.electro
        else:
            electro = np.zeros_like(rec.electro)
            electro[:, first * model.spr:] = pred
            hemo = rec.hemo
        recs.append(sy.Recording(rec.subject_id, electro, hemo, rec.labels))
        covered[str(rec.subject_id)] = [first, n_hemo]
    info = {"direction": model.direction, "modality": "hemo" if model.direction == "e2h" else "electro",
            "covered_steps": covered}
    return sy.PairedDataset(ds.config, recs, ds.truth), info


def cmd_translate(args) -> int:
    if bool(args.ckpt) == bool(args.oracle):
        raise ConfigError("translate needs exactly one of --ckpt FILE or --oracle")
    inputs = {"data": _data_checksum(args.data)}
    if args.ckpt:
        inputs.update(_ckpt_input(args.ckpt))
    run = Run(args, "translate", {"oracle": bool(args.oracle)}, inputs, dataset_dir=True)
    if run.up_to_date:
        print(f"{run.out}: up to date")
        return 0
    ds = sy.load(args.data)
    if args.oracle:
        model = OracleTranslator(ds)
        source = "oracle"
    else:
        model, _, header = _load_model(args.ckpt)
        _check_geometry(model, ds)
        source = header["config_hash"]
    pred_ds, info = _prediction_dataset(model, ds)
    info["source"] = source
    sy.save(pred_ds, run.out, extra={"prediction": info})
    run.finish()
    print(f"wrote {info['modality']} predictions for {len(pred_ds.recordings)} subjects to {run.out}")
    return 0


def _evaluate_predictions(pred_root: str, ds: sy.PairedDataset, ecfg: EvalConfig) -> EvalReport:
    manifest = sy.read_manifest(pred_root)
    info = manifest.get("prediction")
    if not info:
        raise DataError(f"{pred_root} is a dataset, not a prediction directory")
    pred = sy.load(pred_root)
    c = ds.config
    if pred.config.to_dict() != c.to_dict():
        raise ConfigError("prediction directory was produced from a different dataset configuration")
    lo, hi = sy.split_bounds(c, ecfg.split)
    e2h = info["direction"] == "e2h"
    rate_steps = 1 if e2h else c.samples_per_tr
    streams = []
    for p_rec, t_rec in zip(pred.recordings, ds.recordings):
        first = max(lo, int(info["covered_steps"][str(t_rec.subject_id)][0]))
        sl = slice(first * rate_steps, hi * rate_steps)
        if e2h:
            streams.append((p_rec.hemo[:, sl], t_rec.hemo[:, sl]))
        else:
            streams.append((p_rec.electro[:, sl], t_rec.electro[:, sl]))
    rate = 1.0 / c.tr if e2h else c.electro_rate
    per_parcel, mean, counts = score_streams(streams, rate, ecfg.windows_s, ecfg.split)
    return EvalReport(direction=info["direction"], per_parcel=per_parcel, mean=mean, n_windows=counts,
                      config_hash=str(info.get("source", "")))


def cmd_evaluate(args) -> int:
    if bool(args.ckpt) == bool(args.pred):
        raise ConfigError("evaluate needs exactly one of --ckpt FILE or --pred DIR")
    cfg = load_config(args.config)
    inputs = {"data": _data_checksum(args.data)}
    if args.ckpt:
        inputs.update(_ckpt_input(args.ckpt))
    else:
        inputs["pred"] = _data_checksum(args.pred)
    run = Run(args, "evaluate", config_dict({"eval": cfg["eval"]}), inputs)
    if run.up_to_date:
        print(f"{run.out}: up to date")
        return 0
    ds = sy.load(args.data)
    ecfg = cfg["eval"]
    if args.ckpt:
        model, _, _ = _load_model(args.ckpt)
        _check_geometry(model, ds)
        report = evaluate(model, ds, windows=tuple(ecfg.windows_s), split=ecfg.split,
                          classification=ecfg.classification, threads=_threads())
    else:
        report = _evaluate_predictions(args.pred, ds, ecfg)
    report.save(run.out)
    if args.plots and report.per_parcel:
        series = {f"{w:g} s": (np.arange(len(v)), v) for w, v in report.per_parcel.items()}
        plots.line_plot(series, run.out / "spearman.svg", title="per-parcel Spearman", xlabel="parcel",
                        ylabel="Spearman")
    run.finish(mean_spearman={str(k): v for k, v in report.mean.items()}, accuracy=report.accuracy)
    for w, v in report.mean.items():
        print(f"mean Spearman ({w:g} s windows, {report.n_windows[w]} windows): {v:.4f}")
    if report.accuracy is not None:
        print(f"classification accuracy: {report.accuracy:.4f}")
    return 0


def cmd_inspect_hrf(args) -> int:
    from .synth import double_gamma
    inputs = _ckpt_input(args.ckpt)
    run = Run(args, "inspect-hrf", {}, inputs)
    if run.up_to_date:
        print(f"{run.out}: up to date")
        return 0
    model, _, _ = _load_model(args.ckpt)
    params = model.hrf_params()
    params.check_order()
    theta = params.theta.data
    p_r, p_u = params.peaks
    rows = [{"parcel_id": i, **{n: float(v) for n, v in zip(THETA_NAMES, theta[i])},
             "p_r": float(p_r[i]), "p_u": float(p_u[i])} for i in range(theta.shape[0])]
    write_csv(run.out / "hrf.csv", rows, ["parcel_id", *THETA_NAMES, "p_r", "p_u"])
    dt = model.geometry.dt
    curves = double_gamma(theta, dt, model.config.hrf_duration_s)
    t = np.arange(curves.shape[1]) * dt
    step = max(1, int(round(0.1 / dt)))
    curve_rows = [{"t_s": float(t[j]), **{f"parcel{i}": float(curves[i, j]) for i in range(curves.shape[0])}}
                  for j in range(0, curves.shape[1], step)]
    write_csv(run.out / "hrf_curves.csv", curve_rows)
    if args.plots:
        plots.line_plot({f"parcel {i}": (t[::step], curves[i, ::step]) for i in range(curves.shape[0])},
                        run.out / "hrf.svg", title="learned HRF", xlabel="time (s)", ylabel="response")
    run.finish(learned=model.learns_hrf)
    print(f"wrote HRF parameters for {len(rows)} parcels to {run.out / 'hrf.csv'}")
    return 0


def cmd_inspect_attention(args) -> int:
    inputs = _ckpt_input(args.ckpt)
    run = Run(args, "inspect-attention", {}, inputs)
    if run.up_to_date:
        print(f"{run.out}: up to date")
        return 0
    model, _, _ = _load_model(args.ckpt)
    alpha = model.wavelet_alpha()
    if alpha is None:
        raise ConfigError("this checkpoint has no wavelet attention (h2e direction or no_wavelet ablation)")
    alpha = np.atleast_2d(alpha)
    basis = model.basis
    names = [f"d{s}" for s in range(1, basis.levels + 1)] + [f"a{basis.levels}"]
    hz = basis.band_hz(model.geometry.electro_rate)
    groups = ["shared"] if alpha.shape[0] == 1 else [f"parcel{i}" for i in range(alpha.shape[0])]
    rows = [{"group": g, "band": names[s], "band_lo_hz": hz[s][0], "band_hi_hz": hz[s][1], "alpha": float(a[s])}
            for g, a in zip(groups, alpha) for s in range(len(names))]
    write_csv(run.out / "attention.csv", rows)
    if args.plots:
        plots.heatmap(alpha, run.out / "attention.svg", title="wavelet attention", row_labels=groups,
                      col_labels=names)
    run.finish()
    print(f"wrote attention over {len(names)} bands for {len(groups)} group(s) to {run.out / 'attention.csv'}")
    return 0


def cmd_inspect_graph(args) -> int:
    inputs = _ckpt_input(args.ckpt)
    if args.data:
        inputs["data"] = _data_checksum(args.data)
    run = Run(args, "inspect-graph", {}, inputs)
    if run.up_to_date:
        print(f"{run.out}: up to date")
        return 0
    model, _, _ = _load_model(args.ckpt)
    ds = None
    if args.data:
        ds = sy.load(args.data)
        _check_geometry(model, ds)
    graph = model.hemo_graph
    if graph is None:
        if ds is None:
            raise ConfigError("h2e checkpoints build graphs per window; pass --data to inspect one")
        graph = hemo_graph_from(ds, model.config.k_neighbors)
    P = graph.n_nodes
    edges = [{"node_i": i, "node_j": j, "weight": float(graph.weights[i, j]), "in_topk": int(graph.mask[i, j])}
             for i in range(P) for j in range(P) if i != j]
    write_csv(run.out / "graph_edges.csv", edges)
    if args.plots:
        plots.heatmap(np.where(graph.mask, graph.weights, 0.0), run.out / "graph.svg", title="hemo similarity graph")
    n_att = 0
    if ds is not None:
        E, H, _ = split_windows(ds, model, "test")
        E, H = E[:4], H[:4]
        if model.direction == "e2h":
            _, aux = model.forward_e2h(E, return_aux=True)
            layers = {"gat_src": aux["src_attention"].data, "gat_tgt": aux["tgt_attention"].data}
        else:
            _, _, aux = model.forward_h2e(H, return_aux=True)
            layers = {"gat_hemo": aux["hemo_attention"].data}
        att_rows = []
        for name, beta in layers.items():
            # (..., K, P, P) -> (K, P, P), averaged over windows and steps
            beta = beta.reshape((-1,) + beta.shape[-3:]).mean(axis=0)
            for k in range(beta.shape[0]):
                for i in range(beta.shape[1]):
                    for j in range(beta.shape[2]):
                        att_rows.append({"layer": name, "head": k, "row": i, "col": j,
                                         "beta": float(beta[k, i, j])})
            if args.plots:
                plots.heatmap(beta.mean(axis=0), run.out / f"{name}_attention.svg", title=f"{name} attention")
        write_csv(run.out / "gat_attention.csv", att_rows)
        n_att = len(att_rows)
    run.finish()
    print(f"wrote {len(edges)} graph edges" + (f" and {n_att} attention entries" if n_att else "") + f" to {run.out}")
    return 0


def cmd_ablate(args) -> int:
    over = {("train", "seed"): args.seed}
    if args.epochs is not None:
        over[("train", "epochs")] = args.epochs
    cfg = load_config(args.config, over)
    grid = DEFAULT_GRID
    if args.rows:
        wanted = set(args.rows)
        grid = [g for g in DEFAULT_GRID if f"{g[1]}:{g[0]}" in wanted or g[0] in wanted]
        if not grid:
            raise ConfigError(f"no grid rows match {args.rows}; known rows: "
                              f"{[f'{d}:{n}' for n, d, _ in DEFAULT_GRID]}")
    run = Run(args, "ablate", config_dict({k: cfg[k] for k in ("model", "train")}) | {"rows": args.rows},
              {"data": _data_checksum(args.data)})
    if run.up_to_date:
        print(f"{run.out}: up to date")
        return 0
    ds = sy.load(args.data)
    rows = run_ablations(ds, grid, cfg["model"], cfg["train"])
    write_ablation_table(rows, run.out / "ablation.csv")
    hist = [{"row": f"{r.direction}:{r.name}", **h} for r in rows for h in r.history]
    if hist:
        write_csv(run.out / "ablation_history.csv", hist)
    if args.plots:
        skip = {f"{r.name} L_reg": ([h["epoch"] for h in r.history], [h["L_reg"] for h in r.history])
                for r in rows if r.direction == "h2e" and r.history}
        if skip:
            plots.line_plot(skip, run.out / "skip_loss.svg", title="skip loss per epoch", xlabel="epoch",
                            ylabel="L_reg")
    run.finish(rows=len(rows))
    for r in rows:
        print(f"{r.direction:4s} {r.name:30s} {r.status:8s} final={r.final_loss:.4f} "
              f"spearman60={r.spearman_60:.3f}{'  ' + r.reason if r.reason else ''}")
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="samba", description="Electro <-> hemo translation on synthetic data.")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective configuration (defaults merged with --config) and exit")
    p.add_argument("--config", help="JSON config with sections synth, model, train, eval")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def common(sp, config=True, seed=False):
        sp.add_argument("--out", required=True)
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        sp.add_argument("--plots", action="store_true", help="also write SVG figures")
        if config:
            sp.add_argument("--config", dest="sub_config")
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    common(g, seed=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one translation direction")
    common(t, seed=True)
    t.add_argument("--data", required=True)
    t.add_argument("--direction", choices=("e2h", "h2e"))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="epochs to run (extra epochs when resuming)")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="write predictions in dataset format")
    common(tr, config=False)
    tr.add_argument("--data", required=True)
    tr.add_argument("--ckpt")
    tr.add_argument("--oracle", action="store_true", help="use the generator's forward model (e2h)")
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="windowed Spearman and classification accuracy")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--pred", help="prediction directory written by translate")
    e.set_defaults(func=cmd_evaluate)

    for name, func, needs_data in (("inspect-hrf", cmd_inspect_hrf, False),
                                   ("inspect-attention", cmd_inspect_attention, False),
                                   ("inspect-graph", cmd_inspect_graph, True)):
        sp = sub.add_parser(name)
        common(sp, config=False)
        sp.add_argument("--ckpt", required=True)
        if needs_data:
            sp.add_argument("--data")
        sp.set_defaults(func=func)

    a = sub.add_parser("ablate", help="train every ablation row and write the table")
    common(a, seed=True)
    a.add_argument("--data", required=True)
    a.add_argument("--epochs", type=int)
    a.add_argument("--rows", nargs="*", help="subset of rows, e.g. 'e2h:No LSTM' or 'Fixed HRF'")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = getattr(args, "sub_config", None) or args.config
    args.config = config
    try:
        if args.print_config:
            print(json.dumps(config_dict(load_config(config)), indent=2))
            return 0
        if not args.command:
            parser.print_help()
            return 2
        return args.func(args)
    except SambaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3 if isinstance(exc, OSError) else 2


if __name__ == "__main__":
    sys.exit(main())
