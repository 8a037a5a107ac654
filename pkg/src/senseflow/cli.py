"""Command-line front end: ``senseflow {synth,refine,metrics,loss,warp,costvol}``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure such as singular normal equations.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import se3_log
from .costvol import correlation_1d, correlation_2d
from .loss import LossInputs, LossWeights, pretrain_supervised, total_semi_supervised
from .metrics import MetricReport, evaluate_disparity, evaluate_flow, evaluate_scene_flow
from .rigid import CITYSCAPES_DYNAMIC_IDS, GnOptions, refine_scene_flow
from .synth import SceneSpecError, driving_scene, render_scene, scene_from_json
from .warp import inverse_warp_disparity, inverse_warp_flow

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ids(text: str) -> frozenset:
    try:
        return frozenset(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad id list {text!r}") from None


# ---------------------------------------------------------------- synth

def _write_bundle(out: Path, b, fmt: str) -> io.FileBundleManifest:
    out.mkdir(parents=True, exist_ok=True)
    m = io.FileBundleManifest(root=str(out))
    for role in ("image1", "image2", "image_right"):
        io.write_image(out / f"{role}.png", getattr(b, role))
        m.add(role, f"{role}.png", "image_png")
    if fmt == "kitti":
        io.write_kitti_flow(out / "flow.png", b.flow, b.valid)
        m.add("flow", "flow.png", "kitti_flow_png")
        for role, valid in (("disp1", b.valid), ("disp2", b.valid2), ("disp2_warped", b.valid)):
            io.write_kitti_disparity(out / f"{role}.png", getattr(b, role), valid)
            m.add(role, f"{role}.png", "kitti_disp_png")
    else:
        for role in ("flow", "disp1", "disp2", "disp2_warped", "valid"):
            io.write_pfm(out / f"{role}.pfm", getattr(b, role))
            m.add(role, f"{role}.pfm", "pfm")
    for role in ("occ_flow", "occ_disp"):
        io.write_pfm(out / f"{role}.pfm", getattr(b, role))
        m.add(role, f"{role}.pfm", "pfm")
    io.write_labels(out / "labels.png", b.labels)
    m.add("labels", "labels.png", "label_png")
    io.write_intrinsics(out / "intrinsics.txt", b.camera)
    m.intrinsics = "intrinsics.txt"
    (out / "ego.json").write_text(json.dumps({"twist": se3_log(b.ego).tolist(),
                                              "rotation": b.ego.rotation.tolist(),
                                              "translation": b.ego.translation.tolist()}) + "\n")
    m.save(out / "manifest.json")
    return m


def cmd_synth(a) -> int:
    if a.config:
        spec = scene_from_json(Path(a.config).read_text())
    else:
        spec = driving_scene(a.seed, a.height, a.width, moving_object=a.moving_object)
    bundle = render_scene(spec, images=not a.no_images)
    if a.noise > 0:
        rng = np.random.default_rng(a.seed + 1)
        bundle.flow = bundle.flow + rng.normal(0.0, a.noise, bundle.flow.shape)
    _write_bundle(Path(a.out), bundle, a.format)
    print(f"wrote {a.out}/manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------- refine

def _values(x):
    """Split a reader result into ``(values, valid or None)``."""
    return x if isinstance(x, tuple) else (x, None)


def _gather(a, roles, manifest_attr="manifest"):
    """Load each role from an explicit ``--<role>`` path or else from the manifest."""
    man = io.FileBundleManifest.from_file(getattr(a, manifest_attr)) if getattr(a, manifest_attr, None) else None
    out, missing = {}, []
    for role in roles:
        p = getattr(a, role, None)
        if p is not None:
            out[role] = io.load_auto(p)
        elif man is not None and role in man.entries:
            out[role] = man.load(role)
        else:
            missing.append(role)
    return out, man, missing


def cmd_refine(a) -> int:
    maps, man, missing = _gather(a, ("flow", "disp1", "disp2", "labels"))
    if missing:
        raise UsageError(f"refine: missing inputs {', '.join(missing)} (give paths or --manifest)")
    if a.intrinsics:
        cam = io.read_intrinsics(a.intrinsics)
    elif man is not None and man.intrinsics:
        cam = man.camera()
    else:
        raise UsageError("refine: no intrinsics (give --intrinsics or a manifest with one)")
    flow, flow_valid = _values(maps["flow"])
    disp1, _ = _values(maps["disp1"])
    disp2, _ = _values(maps["disp2"])
    labels = np.asarray(maps["labels"])
    if flow_valid is not None:
        # pixels without a flow value cannot vote for the ego-motion
        disp1 = np.where(flow_valid > 0, disp1, 0.0)
    opts = GnOptions(max_iters=a.max_iters, residual_tol=a.tol, huber_delta=a.huber_delta, damping=a.damping)
    res = refine_scene_flow(flow, disp1, disp2, labels, cam, opts, a.dynamic_ids, a.erosion)

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    m = io.FileBundleManifest(root=str(out))
    disp1_orig = _values(maps["disp1"])[0]
    if a.format == "kitti":
        io.write_kitti_flow(out / "flow.png", res.flow, flow_valid)
        io.write_kitti_disparity(out / "disp1.png", disp1_orig)
        io.write_kitti_disparity(out / "disp2_warped.png", res.disparity2)
        m.add("flow", "flow.png", "kitti_flow_png")
        m.add("disp1", "disp1.png", "kitti_disp_png")
        m.add("disp2_warped", "disp2_warped.png", "kitti_disp_png")
    else:
        for role, arr in (("flow", res.flow), ("disp1", disp1_orig), ("disp2_warped", res.disparity2)):
            io.write_pfm(out / f"{role}.pfm", arr)
            m.add(role, f"{role}.pfm", "pfm")
    io.write_pfm(out / "rigid_mask.pfm", res.mask)
    m.add("rigid_mask", "rigid_mask.pfm", "pfm")
    m.save(out / "manifest.json")

    lines = [] if res.trace is None else [json.dumps(r) for r in res.trace.records()]
    summary = {"converged": None if res.trace is None else res.trace.converged,
               "iterations": 0 if res.trace is None else res.trace.iterations,
               "num_pixels": 0 if res.trace is None else res.trace.num_pixels,
               "twist": None if res.transform is None else se3_log(res.transform).tolist()}
    lines.append(json.dumps(summary))
    text = "\n".join(lines) + "\n"
    if a.trace == "-":
        sys.stdout.write(text)
    else:
        Path(a.trace or out / "trace.jsonl").write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------- metrics

def cmd_metrics(a) -> int:
    pred, _, _ = _gather(a, ("flow", "disp1", "disp2_warped"), "pred")
    gt_args = argparse.Namespace(gt=a.gt, flow=a.flow_gt, disp1=a.disp1_gt, disp2_warped=a.disp2_gt,
                                 labels=a.labels)
    gt, gt_man, _ = _gather(gt_args, ("flow", "disp1", "disp2_warped", "labels"), "gt")
    pairs = [r for r in ("disp1", "disp2_warped", "flow") if r in pred and r in gt]
    if not pairs:
        raise UsageError("metrics: no prediction has matching ground truth")

    fg = None
    if a.fg_mask:
        fg = _values(io.load_auto(a.fg_mask))[0] > 0
    elif "labels" in gt:
        fg = np.isin(np.asarray(gt["labels"]), list(a.dynamic_ids))

    def unpack(role):
        gv, gvalid = _values(gt[role])
        pv, _ = _values(pred[role])
        if gvalid is None:
            gvalid = (gv > 0) if gv.ndim == 2 else np.isfinite(gv).all(axis=-1)
        return pv, gv, np.asarray(gvalid) > 0

    reports, data = [], {}
    for role in pairs:
        data[role] = unpack(role)
        pv, gv, valid = data[role]
        if role == "flow":
            reports.append(evaluate_flow(pv, gv, valid, fg, "Fl"))
        else:
            reports.append(evaluate_disparity(pv, gv, valid, fg, "D1" if role == "disp1" else "D2"))
    if len(data) == 3:
        valid = data["disp1"][2] & data["disp2_warped"][2] & data["flow"][2]
        reports.append(evaluate_scene_flow(data["disp1"][:2], data["disp2_warped"][:2], data["flow"][:2],
                                           valid, fg)[3])
    text = MetricReport.csv_header() + "\n" + "".join(r.csv_row() + "\n" for r in reports)
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- loss

_LOSS_ROLES = [f for f in LossInputs.__dataclass_fields__]


def cmd_loss(a) -> int:
    weights = io.read_weights(a.weights) if a.weights else LossWeights()
    roles = {}
    if a.manifest:
        man = io.FileBundleManifest.from_file(a.manifest)
        for role in man.entries:
            if role in _LOSS_ROLES:
                roles[role] = man.load(role)
    for item in a.map or []:
        role, sep, path = item.partition("=")
        if not sep or role not in _LOSS_ROLES:
            raise UsageError(f"loss: bad --map {item!r}; expected ROLE=PATH with ROLE one of {', '.join(_LOSS_ROLES)}")
        roles[role] = io.load_auto(path)
    kw = {}
    for role, val in roles.items():
        values, valid = _values(val)
        kw[role] = np.asarray(values, dtype=np.float64)
        vrole = {"flow_gt": "flow_valid", "disp_gt": "disp_valid"}.get(role)
        if valid is not None and vrole and vrole not in roles:
            kw[vrole] = valid
    if not kw:
        raise UsageError("loss: no input maps given")
    x = LossInputs(**kw)
    report = pretrain_supervised(x, weights) if a.mode == "pretrain" else total_semi_supervised(x, weights)
    sys.stdout.write(report.to_csv() if a.format == "csv" else report.to_json() + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- warp / costvol

def cmd_warp(a) -> int:
    src = _values(io.load_auto(a.source))[0]
    field = _values(io.load_auto(a.field))[0]
    if a.mode == "flow":
        res = inverse_warp_flow(src, field)
    else:
        res = inverse_warp_disparity(src, field)
    io.write_pfm(a.out, res.warped)
    if a.inbounds_out:
        io.write_pfm(a.inbounds_out, res.inbounds)
    return EXIT_OK


def cmd_costvol(a) -> int:
    f1 = io.read_pfm(a.features1)
    f2 = io.read_pfm(a.features2)
    vol = correlation_2d(f1, f2, a.radius) if a.mode == "2d" else correlation_1d(f1, f2, a.radius)
    io.write_pfm(a.out, vol)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="senseflow", description="Scene-flow toolkit: synthetic scenes, rigid refinement, "
                                               "losses, metrics, warping and cost volumes.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="{synth,refine,metrics,loss,warp,costvol}")

    s = sub.add_parser("synth", help="render a synthetic plane scene with exact ground truth")
    s.add_argument("out", help="output directory")
    s.add_argument("--config", help="JSON scene description (see synth.scene_from_json)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=375)
    s.add_argument("--width", type=int, default=1242)
    s.add_argument("--moving-object", action="store_true", help="add an independently moving car")
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian flow noise (px) added before writing")
    s.add_argument("--format", choices=("kitti", "pfm"), default="kitti", help="encoding for flow and disparity")
    s.add_argument("--no-images", action="store_true")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("refine", help="fit ego-motion on static pixels and rewrite background flow and D2")
    r.add_argument("--manifest", help="input bundle manifest (roles flow, disp1, disp2, labels)")
    r.add_argument("--flow")
    r.add_argument("--disp1")
    r.add_argument("--disp2", help="second-frame disparity on its own pixel grid")
    r.add_argument("--labels")
    r.add_argument("--intrinsics", help="text file: fx fy cx cy baseline")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--format", choices=("kitti", "pfm"), default="kitti")
    r.add_argument("--trace", help="JSON-lines trace path, '-' for stdout (default OUT/trace.jsonl)")
    r.add_argument("--max-iters", type=int, default=20)
    r.add_argument("--tol", type=float, default=1e-6)
    r.add_argument("--huber-delta", type=float, default=1.345, help="px; 'inf' for plain least squares")
    r.add_argument("--damping", type=float, default=0.0)
    r.add_argument("--erosion", type=int, default=10)
    r.add_argument("--dynamic-ids", type=_ids, default=CITYSCAPES_DYNAMIC_IDS,
                   help="comma-separated label ids treated as movable (default CityScapes 10-18)")
    r.set_defaults(func=cmd_refine)

    m = sub.add_parser("metrics", help="D1/D2/Fl/SF outlier rates and EPE as CSV")
    m.add_argument("--pred", help="prediction manifest (roles flow, disp1, disp2_warped)")
    m.add_argument("--gt", help="ground-truth manifest (roles flow, disp1, disp2_warped, labels)")
    m.add_argument("--flow")
    m.add_argument("--disp1")
    m.add_argument("--disp2-warped", dest="disp2_warped")
    m.add_argument("--flow-gt")
    m.add_argument("--disp1-gt")
    m.add_argument("--disp2-gt")
    m.add_argument("--labels", help="label map; dynamic ids form the foreground")
    m.add_argument("--fg-mask", help="explicit foreground mask, overrides labels")
    m.add_argument("--dynamic-ids", type=_ids, default=CITYSCAPES_DYNAMIC_IDS)
    m.add_argument("--out", help="also write the CSV here")
    m.set_defaults(func=cmd_metrics)

    lo = sub.add_parser("loss", help="evaluate the training losses on stored maps")
    lo.add_argument("--manifest", help="manifest whose roles are LossInputs field names")
    lo.add_argument("--map", action="append", metavar="ROLE=PATH", help="add or override one input map")
    lo.add_argument("--weights", help="key = value weights file mirroring LossWeights")
    lo.add_argument("--mode", choices=("semi", "pretrain"), default="semi")
    lo.add_argument("--format", choices=("json", "csv"), default="json")
    lo.set_defaults(func=cmd_loss)

    w = sub.add_parser("warp", help="backward-warp a map by a flow or disparity field")
    w.add_argument("source")
    w.add_argument("field")
    w.add_argument("--mode", choices=("flow", "disparity"), default="flow")
    w.add_argument("--out", required=True)
    w.add_argument("--inbounds-out")
    w.set_defaults(func=cmd_warp)

    c = sub.add_parser("costvol", help="correlation cost volume between two PFM feature maps")
    c.add_argument("features1")
    c.add_argument("features2")
    c.add_argument("--radius", type=int, default=4)
    c.add_argument("--mode", choices=("1d", "2d"), default="1d")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_costvol)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        a = parser.parse_args(argv)
        if a.command is None:
            raise UsageError("senseflow: no subcommand given")
        return a.func(a)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except np.linalg.LinAlgError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, OverflowError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (io.FormatError, SceneSpecError, OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
