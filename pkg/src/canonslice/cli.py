"""Command-line entry point: ``canonslice <subcommand> [flags]``.

Machine-readable results go to stdout (or ``--out``) as JSON lines; human
summaries go to stderr.  Exit status is 0 on success, 1 when a module
raises, and 2 for flag misuse.  ``--save-config run.json`` records the fully
resolved parameters; ``--config run.json`` replays them.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .metrics import metric_report
from .phantoms import KINDS, make_phantom
from .predictor import (
    DEFAULT_MC_SAMPLES,
    DEFAULT_VARIANCE_THRESHOLD,
    build_dictionary,
    load_dictionary,
    mc_aggregate,
    save_dictionary,
)
from .recon import PSF, ReconConfig, masked_psnr, svr_refine
from .sampler import SamplingConfig, generate_dataset, manifest_row, read_manifest, row_transform
from .se3core import RigidTransform
from .volume import (
    Volume,
    extract_slice,
    load_slice,
    load_volume,
    minmax_rescale,
    percentile_clip,
    save_volume,
    zscore_normalize,
)

log = logging.getLogger("canonslice")

_CONFIG_VERSION = 1
# flags that steer a run but are not part of its recorded parameters
_META = ("config", "save_config", "verbose", "quiet", "func")


class _Parser(argparse.ArgumentParser):
    """Shows defaults next to every flag's help."""

    def __init__(self, *a, **kw):
        kw.setdefault("formatter_class", argparse.ArgumentDefaultsHelpFormatter)
        super().__init__(*a, **kw)


# --- output helpers ------------------------------------------------------------


def _clean(x):
    """JSON-safe copy: non-finite floats become ``None``, numpy scalars become Python."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _dumps(row) -> str:
    return json.dumps(_clean(row), sort_keys=True, allow_nan=False)


def _emit(rows, out: str | None) -> None:
    text = "".join(_dumps(r) + "\n" for r in rows)
    if out:
        _ensure_parent(out)
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def _ensure_parent(path: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def _summary(msg: str) -> None:
    log.warning(msg)


def _pool_map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _slice_path(row: dict, manifest_path: str) -> str:
    base = os.path.abspath(manifest_path)
    if not os.path.isdir(base):
        base = os.path.dirname(base)
    return os.path.join(base, row["slice"])


def _slice_rows(path: str) -> list[dict]:
    """Manifest rows, or one row per ``*.spv`` file (sorted) when ``path`` is a directory."""
    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path) if f.endswith(".spv"))
        return [{"id": os.path.splitext(f)[0], "slice": f} for f in names]
    return read_manifest(path)


# --- shared flag groups ----------------------------------------------------------


def _add_sampling(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pose sampling")
    g.add_argument("--scheme", default="euler", choices=["euler", "fibonacci", "polar", "random", "identity"],
                   help="pose-set scheme")
    g.add_argument("--step", type=float, default=18.0, help="Euler grid angle step (degrees)")
    g.add_argument("--tz", type=float, nargs=3, metavar=("MIN", "MAX", "STEP"), default=[-40.0, 40.0, 2.0],
                   help="plane offsets along the normal, half-open [MIN, MAX) (mm)")
    g.add_argument("--n-normals", type=int, default=300, help="Fibonacci normals (count)")
    g.add_argument("--n-inplane", type=int, default=10, help="in-plane rotations per normal (count)")
    g.add_argument("--n-phi", type=int, default=20, help="uniform-polar azimuth samples (count)")
    g.add_argument("--n-theta", type=int, default=15, help="uniform-polar polar samples (count)")
    g.add_argument("--n-random", type=int, default=100, help="random validation poses (count)")
    g.add_argument("--seed", type=int, default=0, help="random seed (integer)")


def _sampling_config(a) -> SamplingConfig:
    return SamplingConfig(
        scheme=a.scheme,
        angle_step=math.radians(a.step),
        n_normals=a.n_normals,
        n_inplane=a.n_inplane,
        n_phi=a.n_phi,
        n_theta=a.n_theta,
        n_random=a.n_random,
        tz_min=a.tz[0],
        tz_max=a.tz[1],
        tz_step=a.tz[2],
        seed=a.seed,
    )


def _add_slice_geometry(p: argparse.ArgumentParser) -> None:
    p.add_argument("--slice-size", type=int, default=None, help="slice side (pixels); default: volume x size")
    p.add_argument("--slice-spacing", type=float, default=None, help="slice pixel spacing (mm); default: voxel spacing")
    p.add_argument("--min-content", type=float, default=0.05,
                   help="drop slices with a smaller nonzero-pixel fraction (fraction 0..1)")


def _preprocess(v: Volume, how: str) -> Volume:
    if how == "minmax":
        return minmax_rescale(v)
    if how == "zscore":
        return zscore_normalize(v, v.data > 0)
    if how == "percentile":
        return percentile_clip(v)
    return v


# --- subcommands -------------------------------------------------------------------


def cmd_phantom(a) -> None:
    v = make_phantom(a.kind, a.dims, a.spacing, a.seed)
    _ensure_parent(a.out)
    save_volume(v, a.out, a.dtype)
    row = {"command": "phantom", "kind": a.kind, "dims": list(v.dims), "spacing": v.spacing, "out": a.out,
           "min": float(v.data.min()), "max": float(v.data.max())}
    _emit([row], a.summary_out)
    _summary(f"phantom {a.kind}: {v.dims} voxels at {v.spacing} mm -> {a.out}")


def cmd_gen_dataset(a) -> None:
    v = _preprocess(load_volume(a.volume), a.preprocess)
    cfg = _sampling_config(a)
    rows = generate_dataset(v, cfg, a.out_dir, a.slice_size, a.slice_spacing, a.min_content, a.anchor_l, a.threads)
    manifest = os.path.join(a.out_dir, "manifest.jsonl")
    _emit([{"command": "gen-dataset", "manifest": manifest, "rows": len(rows), "scheme": cfg.scheme}], a.summary_out)
    _summary(f"gen-dataset: {len(rows)} slices -> {manifest}")


def cmd_build_dict(a) -> None:
    v = _preprocess(load_volume(a.volume), a.preprocess)
    cfg = _sampling_config(a)
    m = build_dictionary(v, cfg, a.descriptor_size, a.slice_size, a.slice_spacing, a.min_content, a.similarity,
                         a.top_k, a.temperature)
    _ensure_parent(a.out)
    save_dictionary(m, a.out)
    _emit([{"command": "build-dict", "entries": len(m), "model": a.out, "descriptor_size": m.descriptor_size,
            "similarity": m.similarity}], a.summary_out)
    _summary(f"build-dict: {len(m)} entries -> {a.out}")


def _prediction_row(row: dict, rel: str, pose: RigidTransform | None, anchor_l: float, extra: dict) -> dict:
    if pose is None:
        out = {"id": row["id"], "slice": rel, "euler": None, "quaternion": None, "anchors": None, "anchor_l": anchor_l}
    else:
        out = manifest_row(row["id"], rel, pose, anchor_l, row.get("content_fraction"))
        out.pop("content_fraction")
    out.update(extra)
    return out


def cmd_predict(a) -> None:
    m = load_dictionary(a.model)
    rows = _slice_rows(a.manifest)
    out_dir = os.path.dirname(os.path.abspath(a.out)) if a.out else os.getcwd()

    def one(row):
        path = _slice_path(row, a.manifest)
        img = load_slice(path)
        rel = os.path.relpath(path, out_dir)
        anchor_l = row.get("anchor_l") or img.l * img.spacing
        if a.mc == 0:
            try:
                pose = m.predict(img)
            except ValueError as e:
                return _prediction_row(row, rel, None, anchor_l, {"status": "failed", "accepted": False, "error": str(e)})
            return _prediction_row(row, rel, pose, anchor_l, {"status": "accepted", "accepted": True})
        ps = mc_aggregate(m, img, a.mc, a.threshold, a.seed, a.w_rot, a.w_trans)
        return _prediction_row(row, rel, ps.mean, anchor_l, {"status": ps.status, "accepted": ps.accepted,
                                                             "variance": ps.variance, "iterations": ps.iterations})

    out = _pool_map(one, rows, a.threads)
    _emit(out, a.out)
    n_ok = sum(r["accepted"] for r in out)
    _summary(f"predict: {len(out)} slices, {n_ok} accepted, {len(out) - n_ok} discarded")


def _mean_std(vals):
    vals = [v for v in vals if v is not None and math.isfinite(v)]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}


def cmd_evaluate(a) -> None:
    preds = read_manifest(a.pred)
    gts = {r["id"]: r for r in read_manifest(a.gt)}
    vol = load_volume(a.volume) if a.volume else None

    def one(p):
        g = gts.get(p["id"])
        if g is None:
            raise ValueError(f"prediction {p['id']!r} has no ground-truth row")
        if p.get("quaternion") is None:
            return {"id": p["id"], "status": p.get("status", "failed")}
        tp, tg = row_transform(p, a.label), row_transform(g, a.label)
        anchor_l = a.anchor_l or g.get("anchor_l") or p.get("anchor_l")
        pi = gi = None
        if vol is not None:
            gi = load_slice(_slice_path(g, a.gt))
            # re-slice at the stored slices' precision so identical poses compare exactly
            pi = extract_slice(vol, tp, gi.l, gi.spacing).pixels.astype(gi.pixels.dtype)
        rep = metric_report(tp, tg, anchor_l, pi, gi, w_rot=a.w_rot, w_trans=a.w_trans).as_dict()
        rep.update({"id": p["id"], "status": p.get("status", "accepted")})
        return rep

    rows = _pool_map(one, preds, a.threads)
    keys = ("ed_error", "gd_error", "cc", "mse", "psnr", "ssim")
    agg = {"id": "__summary__", "n": len(rows), "evaluated": sum("ed_error" in r for r in rows)}
    for k in keys:
        agg[k] = _mean_std([r.get(k) for r in rows])
    _emit(rows + [agg], a.out)
    ed, gd = agg["ed_error"], agg["gd_error"]
    _summary(f"evaluate: {agg['evaluated']}/{len(rows)} slices, ED {ed['mean']} ± {ed['std']} mm, "
             f"GD {gd['mean']} ± {gd['std']}")


def cmd_reconstruct(a) -> None:
    rows = read_manifest(a.manifest)
    if a.accepted_only:
        rows = [r for r in rows if r.get("accepted", True)]
    rows = [r for r in rows if r.get("quaternion") is not None]
    if not rows:
        raise ValueError("no slices with poses to reconstruct from")
    slices = [(load_slice(_slice_path(r, a.manifest)), row_transform(r)) for r in rows]
    pixel = a.pixel_spacing or slices[0][0].spacing
    cfg = ReconConfig(
        dims=tuple(a.grid),
        spacing=a.spacing,
        psf=PSF.from_thickness(a.psf_thickness, pixel),
        svr_iterations=a.iters,
        rot_radius=math.radians(a.rot_radius),
        trans_radius=a.trans_radius,
    )
    rec = svr_refine(slices, None, cfg, a.threads)
    _ensure_parent(a.out)
    save_volume(rec.volume, a.out, "f32")
    if a.coverage_out:
        _ensure_parent(a.coverage_out)
        save_volume(Volume(rec.coverage.astype(np.uint8)), a.coverage_out, "u8")
    summary = {"command": "reconstruct", "slices": len(slices), "used": int(rec.used.sum()), "out": a.out,
               "coverage": float(rec.coverage.mean()), "history": list(rec.history), "psnr": None}
    if a.reference:
        ref = load_volume(a.reference)
        if rec.coverage.any():
            summary["psnr"] = masked_psnr(rec.volume, ref, rec.coverage)
    _emit([summary], a.summary_out)
    _summary(f"reconstruct: {len(slices)} slices, coverage {summary['coverage']:.3f}, PSNR {summary['psnr']} dB")


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="canonslice", description="Canonical slice pose sampling, prediction and reconstruction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="worker threads (count); outputs do not depend on it")
    p.add_argument("--config", metavar="JSON", help="replay a run saved with --save-config")
    p.add_argument("--save-config", metavar="JSON", help="write the resolved run configuration here")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more log output on stderr")
    p.add_argument("-q", "--quiet", action="store_true", help="no summary on stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("phantom", help="write a synthetic test volume", formatter_class=p.formatter_class)
    s.add_argument("--kind", choices=KINDS, default="blobs", help="phantom family")
    s.add_argument("--dims", type=int, default=64, help="cube side (voxels)")
    s.add_argument("--spacing", type=float, default=1.0, help="voxel spacing (mm)")
    s.add_argument("--seed", type=int, default=0, help="random seed for the blobs phantom (integer)")
    s.add_argument("--dtype", choices=["f32", "u8"], default="f32", help="stored scalar type")
    s.add_argument("--out", required=True, help="output SPV1 volume (path)")
    s.add_argument("--summary-out", help="JSON-lines summary file (path); default stdout")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("gen-dataset", help="sample labelled slices from a volume", formatter_class=p.formatter_class)
    s.add_argument("--volume", required=True, help="input SPV1 volume (path)")
    s.add_argument("--out-dir", required=True, help="dataset directory for slices/ and manifest.jsonl (path)")
    s.add_argument("--preprocess", choices=["none", "minmax", "zscore", "percentile"], default="none",
                   help="intensity normalization applied before slicing")
    s.add_argument("--anchor-l", type=float, default=None, help="anchor point half-extent (mm); default: slice side")
    _add_slice_geometry(s)
    _add_sampling(s)
    s.add_argument("--summary-out", help="JSON-lines summary file (path); default stdout")
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("build-dict", help="build a dictionary pose predictor", formatter_class=p.formatter_class)
    s.add_argument("--volume", required=True, help="atlas SPV1 volume (path)")
    s.add_argument("--out", required=True, help="output model file (path)")
    s.add_argument("--preprocess", choices=["none", "minmax", "zscore", "percentile"], default="none",
                   help="intensity normalization applied before slicing")
    s.add_argument("--descriptor-size", type=int, default=32, help="descriptor side after downsampling (pixels)")
    s.add_argument("--similarity", choices=["cc", "ssim"], default="cc", help="descriptor similarity")
    s.add_argument("--top-k", type=int, default=10, help="candidates for stochastic draws (count)")
    s.add_argument("--temperature", type=float, default=0.05, help="softmax temperature (similarity units)")
    _add_slice_geometry(s)
    _add_sampling(s)
    s.add_argument("--summary-out", help="JSON-lines summary file (path); default stdout")
    s.set_defaults(func=cmd_build_dict)

    s = sub.add_parser("predict", help="predict canonical poses for slices", formatter_class=p.formatter_class)
    s.add_argument("--model", required=True, help="dictionary model file (path)")
    s.add_argument("--manifest", required=True, help="manifest of slices, or a directory of SPV1 slices, to predict (path)")
    s.add_argument("--mc", "--mc-samples", dest="mc", type=int, default=DEFAULT_MC_SAMPLES, help="Monte-Carlo samples per slice (count); 0 = single deterministic prediction")
    s.add_argument("--threshold", "--variance-threshold", dest="threshold", type=float, default=DEFAULT_VARIANCE_THRESHOLD,
                   help="accept when the Fréchet variance is at most this (squared geodesic units)")
    s.add_argument("--w-rot", type=float, default=1.0, help="metric weight on rotation (per rad^2)")
    s.add_argument("--w-trans", type=float, default=1.0, help="metric weight on translation (per mm^2)")
    s.add_argument("--seed", type=int, default=0, help="Monte-Carlo seed (integer)")
    s.add_argument("--out", help="JSON-lines predictions (path); default stdout")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="compare predicted and ground-truth poses", formatter_class=p.formatter_class)
    s.add_argument("--pred", required=True, help="prediction JSON lines (path)")
    s.add_argument("--gt", required=True, help="ground-truth manifest (path)")
    s.add_argument("--volume", help="atlas SPV1 volume; enables image metrics on re-sliced predictions (path)")
    s.add_argument("--label", choices=["quaternion", "euler", "anchors"], default="quaternion",
                   help="which label encoding to read poses from")
    s.add_argument("--anchor-l", type=float, default=None, help="anchor half-extent for ED (mm); default: from rows")
    s.add_argument("--w-rot", type=float, default=1.0, help="metric weight on rotation (per rad^2)")
    s.add_argument("--w-trans", type=float, default=1.0, help="metric weight on translation (per mm^2)")
    s.add_argument("--out", help="JSON-lines report (path); default stdout")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("reconstruct", help="reconstruct a volume from posed slices", formatter_class=p.formatter_class)
    s.add_argument("--manifest", required=True, help="slices with poses, ground truth or predicted (path)")
    s.add_argument("--grid", type=int, nargs=3, default=[64, 64, 64], metavar=("NX", "NY", "NZ"),
                   help="output grid size (voxels)")
    s.add_argument("--spacing", type=float, default=1.0, help="output voxel spacing (mm)")
    s.add_argument("--psf-thickness", type=float, default=1.0, help="slice thickness, the through-plane PSF FWHM (mm)")
    s.add_argument("--pixel-spacing", type=float, default=None,
                   help="in-plane PSF FWHM (mm); default: the slices' pixel spacing")
    s.add_argument("--iters", type=int, default=0, help="SVR refinement rounds (count); 0 = Gaussian average only")
    s.add_argument("--rot-radius", type=float, default=10.0, help="registration search radius (degrees)")
    s.add_argument("--trans-radius", type=float, default=8.0, help="registration search radius (mm)")
    s.add_argument("--accepted-only", action="store_true", help="skip rows whose prediction was not accepted")
    s.add_argument("--reference", help="reference SPV1 volume for a PSNR summary over covered voxels (path)")
    s.add_argument("--out", required=True, help="output SPV1 volume, f32 (path)")
    s.add_argument("--coverage-out", help="output SPV1 coverage mask, u8 (path)")
    s.add_argument("--summary-out", help="JSON-lines summary file (path); default stdout")
    s.set_defaults(func=cmd_reconstruct)
    return p


def _load_config(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if cfg.get("version") != _CONFIG_VERSION or "command" not in cfg or "params" not in cfg:
        raise ValueError(f"{path}: not a run configuration")
    return cfg


def _resolve(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    a = parser.parse_args(argv)
    if a.config:
        cfg = _load_config(a.config)
        replay = parser.parse_args([cfg["command"]] + _required_stub(parser, cfg["command"]))
        for k, v in cfg["params"].items():
            setattr(replay, k, v)
        replay.config, replay.save_config = a.config, a.save_config
        replay.verbose, replay.quiet = a.verbose, a.quiet
        if a.threads is not None:
            replay.threads = a.threads
        a = replay
    elif a.command is None:
        parser.error("a subcommand is required")
    if a.threads is None:
        a.threads = 1
    if a.threads < 1:
        parser.error("--threads must be >= 1")
    return a


def _required_stub(parser, command: str) -> list[str]:
    """Placeholder values for required flags so a replay parses; the saved params overwrite them."""
    sub = next(x for x in parser._actions if isinstance(x, argparse._SubParsersAction)).choices[command]
    out = []
    for act in sub._actions:
        if act.required and act.option_strings:
            out += [act.option_strings[0], "_"]
    return out


def _params(a: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(a).items()) if k not in _META and k not in ("command",)}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = _resolve(parser, argv)
    except SystemExit as e:
        return int(e.code or 0)
    except (OSError, ValueError) as e:
        print(f"canonslice: error: {e}", file=sys.stderr)
        return 1
    level = logging.ERROR if a.quiet else (logging.DEBUG if a.verbose > 1 else logging.INFO if a.verbose else logging.WARNING)
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr)
    log.setLevel(level)
    try:
        if a.save_config:
            _ensure_parent(a.save_config)
            with open(a.save_config, "w", encoding="utf-8") as fh:
                json.dump({"version": _CONFIG_VERSION, "command": a.command, "params": _params(a)}, fh,
                          sort_keys=True, indent=2)
                fh.write("\n")
        a.func(a)
    except (OSError, ValueError, KeyError) as e:
        print(f"canonslice: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
