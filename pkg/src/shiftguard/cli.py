"""Command-line pipeline: synth, shift, pretrain, adapt, eval, study, project.

Every command reads one JSON config (``--config``), zero or more inputs
(``--in``, order matters per command) and writes into one output directory
(``--out``).  The config file is copied verbatim into the output directory.
Failures print a single ``error: ...`` line to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import benchmark as bm
from .gadmodel import GadModel, PretrainConfig, encode, pretrain, score
from .graph import load_bundle, save_bundle, sym_normalize
from .tune import AdaptConfig, adapt, adapted_scores, align, load_aligner, load_estimator, save_params

COMMANDS = ("synth", "shift", "pretrain", "adapt", "eval", "study", "project")

# name of each --in slot, required slots first
INPUTS = {
    "synth": ([], []),
    "shift": (["bundle"], ["classes"]),
    "pretrain": (["bundle"], []),
    "adapt": (["bundle", "model"], []),
    "eval": (["bundle", "model"], ["aligner", "estimator"]),
    "study": (["bundle_before", "bundle_after", "model"], []),
    "project": (["bundle", "model"], ["aligner"]),
}


class CliError(Exception):
    pass


def _section(cfg: dict, name: str, cls):
    """Build a config dataclass from ``cfg[name]``; its seed defaults to the global seed."""
    raw = cfg.get(name, {})
    if not isinstance(raw, dict):
        raise CliError(f"config section {name!r} must be an object")
    raw = dict(raw)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise CliError(f"unknown keys in config section {name!r}: {', '.join(unknown)}")
    if "seed" in known:
        raw.setdefault("seed", cfg["seed"])
    return cls(**raw)


def _load_config(path: Path) -> tuple[dict, bytes]:
    if not path.is_file():
        raise CliError(f"config not found: {path}")
    text = path.read_bytes()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise CliError(f"config is not valid JSON: {e.msg} (line {e.lineno})") from None
    if not isinstance(cfg, dict):
        raise CliError("config must be a JSON object")
    if not isinstance(cfg.get("seed"), int) or isinstance(cfg.get("seed"), bool):
        raise CliError("config needs an integer 'seed'")
    return cfg, text


def _bind_inputs(command: str, paths: list[str]) -> dict[str, Path]:
    required, optional = INPUTS[command]
    if len(paths) < len(required) or len(paths) > len(required) + len(optional):
        names = required + [f"[{o}]" for o in optional]
        raise CliError(f"{command} expects --in {' '.join(names) or '(none)'}, got {len(paths)}")
    bound = dict(zip(required + optional, map(Path, paths)))
    for name, p in bound.items():
        if not p.exists():
            raise CliError(f"{name} not found: {p}")
    return bound


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg, inputs, out: Path) -> None:
    save_bundle(bm.synth_graph(_section(cfg, "synth", bm.SynthConfig)), out)


def _read_classes(path: Path, n: int) -> np.ndarray:
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "class":
        raise CliError(f"{path.name}: expected header 'class'")
    try:
        classes = np.array([int(v) for v in lines[1:]], dtype=np.int64)
    except ValueError:
        raise CliError(f"{path.name}: class ids must be integers") from None
    if classes.size != n:
        raise CliError(f"{path.name}: {classes.size} rows for {n} nodes")
    return classes


def cmd_shift(cfg, inputs, out: Path) -> None:
    g = load_bundle(inputs["bundle"])
    spec = _section(cfg, "shift", bm.ShiftSpec)
    if spec.method == "kmeans_holdout":
        if "classes" in inputs:
            raise CliError("kmeans_holdout takes no classes file")
        shifted = bm.construct_shift_kmeans(g, spec)
    else:
        if "classes" not in inputs:
            raise CliError("class_holdout needs a classes file as second --in")
        shifted = bm.apply_class_holdout(g, _read_classes(inputs["classes"], g.n), spec)
    save_bundle(shifted, out)


def cmd_pretrain(cfg, inputs, out: Path) -> None:
    g = load_bundle(inputs["bundle"]).remove_unseen()
    history: list = []
    m = pretrain(g, _section(cfg, "pretrain", PretrainConfig), history)
    m.save(out / "model.json")
    _write_json(out / "history.json", history)


def cmd_adapt(cfg, inputs, out: Path) -> None:
    g = load_bundle(inputs["bundle"]).without_labels()
    m = GadModel.load(inputs["model"])
    res = adapt(g, m, _section(cfg, "adapt", AdaptConfig))
    save_params(res.aligner, out / "aligner.json")
    save_params(res.estimator, out / "estimator.json")
    _write_json(out / "trace.json", res.trace)


def _check_estimator(path: Path, m: GadModel) -> None:
    e = load_estimator(path)
    if e.weight.shape[0] != m.repr_dim:
        raise CliError("estimator size does not match the model's representation size")


def cmd_eval(cfg, inputs, out: Path) -> None:
    g = load_bundle(inputs["bundle"])
    g.require_labels()
    m = GadModel.load(inputs["model"])
    report = bm.metric_report(g, score(g, m)).to_dict()
    if "aligner" in inputs:
        if "estimator" in inputs:
            # the estimator only feeds the dual branch; it is checked, not used for scoring
            _check_estimator(inputs["estimator"], m)
        unadapted = report
        report = bm.metric_report(g, adapted_scores(g, m, load_aligner(inputs["aligner"]))).to_dict()
        report["unadapted"] = unadapted
    _write_json(out / "report.json", report)


def cmd_study(cfg, inputs, out: Path) -> None:
    before = load_bundle(inputs["bundle_before"])
    after = load_bundle(inputs["bundle_after"])
    m = GadModel.load(inputs["model"])
    report = bm.metric_report(after, score(after, m))
    report.contamination_bins = bm.contamination_study(before, after, m)
    _write_json(out / "report.json", report.to_dict())


def pca_2d(h: np.ndarray) -> np.ndarray:
    """Projection onto the top-2 principal axes, signs fixed so each axis' largest |loading| is positive."""
    c = h - h.mean(axis=0)
    cov = c.T @ c / max(h.shape[0] - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    axes = vecs[:, np.argsort(vals, kind="stable")[::-1][:2]]
    if axes.shape[1] < 2:
        axes = np.pad(axes, ((0, 0), (0, 2 - axes.shape[1])))
    flip = np.sign(axes[np.argmax(np.abs(axes), axis=0), np.arange(axes.shape[1])])
    return c @ (axes * np.where(flip == 0, 1.0, flip))


def cmd_project(cfg, inputs, out: Path) -> None:
    g = load_bundle(inputs["bundle"])
    m = GadModel.load(inputs["model"])
    x = g.features if "aligner" not in inputs else align(g.features, load_aligner(inputs["aligner"]))
    xy = pca_2d(encode(sym_normalize(g), x, m).data)
    labels = g.labels if g.has_labels else None
    rows = ["node_id,x,y,label,unseen"]
    for i in range(g.n):
        lab = "" if labels is None else str(int(labels[i]))
        rows.append(f"{i},{float(xy[i, 0])!r},{float(xy[i, 1])!r},{lab},{int(g.unseen[i])}")
    (out / "projection.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    # argparse prints usage on error; keep the single-line contract instead
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shiftguard", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, type=Path, help="JSON config file")
    p.add_argument("--in", dest="inputs", action="append", default=[], metavar="PATH",
                   help="input path; repeat in the order the command expects")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg, raw = _load_config(args.config)
        inputs = _bind_inputs(args.command, args.inputs)
        out = args.out
        if out.exists() and not out.is_dir():
            raise CliError(f"--out is not a directory: {out}")
        if any(out.resolve() == p.resolve() for p in inputs.values()):
            raise CliError("--out must differ from every input")
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_bytes(raw)
        HANDLERS[args.command](cfg, inputs, out)
    except (CliError, ValueError, KeyError, TypeError, OSError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        if isinstance(e, KeyError):
            msg = f"missing key {e}"
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
