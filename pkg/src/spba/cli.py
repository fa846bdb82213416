"""Command-line surface: synth -> init -> optimize -> eval, plus fit-basis
and the convergence sweep.

Every command writes its outputs atomically and drops a ``meta.json`` with
the effective configuration, its hash, and the seeds in effect, so equal
meta implies bit-identical reruns. Failures exit nonzero with one JSON
error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataio, synth
from .alignment import ScaleFactor, init_motion
from .config import RunConfig
from .errors import SpbaError
from .geometry import Twist, exp_rotation
from .initpose import (
    build_template_grid,
    grid_cache_key,
    init_alpha,
    init_style,
    load_grid,
    retrieve_pose,
    save_grid,
)
from .metrics import evaluate_run
from .objective import LossBreakdown
from .renderer import render_view
from .shapespace import StyleVector, generate, load_basis, save_basis
from .solver import (
    SolverState,
    basin_sweep,
    optimize,
    state_from_dict,
    state_to_dict,
)


def _load_config(path) -> RunConfig:
    return RunConfig.from_file(path) if path else RunConfig()


def _write_loss_csv(path, history) -> None:
    lines = ["iter,l_ph,l_cd,l_invd,total,alpha"]
    for i, row in enumerate(history):
        alpha = row.alpha if row.alpha is not None else float("nan")
        lines.append(f"{i},{row.l_ph!r},{row.l_cd!r},{row.l_invd!r},{row.total!r},{alpha!r}")
    dataio.atomic_write_text(path, "\n".join(lines) + "\n")


def read_loss_csv(path):
    history = []
    with open(path, "r", encoding="utf-8") as f:
        next(f)
        for line in f:
            _, l_ph, l_cd, l_invd, total, alpha = line.strip().split(",")
            history.append(
                LossBreakdown(
                    l_ph=float(l_ph), l_cd=float(l_cd), l_invd=float(l_invd),
                    total=float(total), alpha=float(alpha),
                )
            )
    return history


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    with open(args.spec, "r", encoding="utf-8") as f:
        spec_doc = json.load(f)
    basis, spec = build_synth_spec(cfg, spec_doc, spec_dir=os.path.dirname(args.spec))
    seq, gt = synth.generate_sequence(spec)
    synth.write_sequence_dir(args.out_dir, seq, gt, meta=cfg.meta("synth", {"spec": spec_doc}))
    save_basis(os.path.join(args.out_dir, "basis.bin"), basis)
    print(f"wrote {len(seq)} frames to {args.out_dir}")
    return 0


_SPEC_KEYS = {
    "basis_file", "procedural_basis", "style", "seed", "frames", "rotation_deg",
    "translation", "image_size", "noise_sigma", "texture_frequency",
    "fill_fraction", "azimuth_deg", "elevation_deg", "distance_factor",
    "gt_upsample", "image_supersample", "background", "ext_alpha",
    "ext_pose_noise_deg", "ext_hole_fraction",
}


def build_synth_spec(cfg: RunConfig, spec_doc: dict, spec_dir: str = "."):
    unknown = set(spec_doc) - _SPEC_KEYS
    if unknown:
        raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
    if "basis_file" in spec_doc:
        basis = load_basis(os.path.join(spec_dir, spec_doc["basis_file"]))
    else:
        proc = dict(spec_doc.get("procedural_basis", {}))
        basis = synth.default_basis(
            num_points=int(proc.get("num_points", cfg["basis.num_points"])),
            num_modes=int(proc.get("num_modes", cfg["basis.num_modes"])),
            seed=int(proc.get("seed", cfg["seed"])),
            diameter=float(proc.get("diameter", cfg["basis.diameter"])),
            exemplar_count=int(proc.get("exemplar_count", cfg["basis.exemplar_count"])),
        )
    sec = cfg.section("synth")
    fields = {k: spec_doc.get(k, sec.get(k)) for k in sec}
    spec = synth.SyntheticSpec(
        basis=basis,
        style=np.array(spec_doc["style"], dtype=float) if "style" in spec_doc else None,
        seed=int(spec_doc.get("seed", cfg["seed"])),
        upsample=int(cfg["renderer.upsample"]),
        gt_upsample=int(spec_doc["gt_upsample"]) if "gt_upsample" in spec_doc else None,
        frames=int(fields["frames"]),
        rotation_deg=float(fields["rotation_deg"]),
        translation=float(fields["translation"]),
        image_size=int(fields["image_size"]),
        noise_sigma=float(fields["noise_sigma"]),
        texture_frequency=float(fields["texture_frequency"]),
        fill_fraction=float(fields["fill_fraction"]),
        azimuth_deg=float(fields["azimuth_deg"]),
        elevation_deg=float(fields["elevation_deg"]),
        distance_factor=float(fields["distance_factor"]),
        image_supersample=int(fields["image_supersample"]),
        background=float(fields["background"]),
        ext_alpha=float(fields["ext_alpha"]),
        ext_pose_noise_deg=float(fields["ext_pose_noise_deg"]),
        ext_hole_fraction=float(fields["ext_hole_fraction"]),
    )
    return basis, spec


def cmd_fit_basis(args) -> int:
    from .shapespace import fit_basis

    clouds = [dataio.read_ply(p) for p in args.clouds]
    basis = fit_basis(clouds, args.modes)
    save_basis(args.output, basis)
    print(f"fit {basis.num_modes} modes over {len(clouds)} clouds -> {args.output}")
    return 0


def _grid_for(cfg: RunConfig, basis, K, cache_dir):
    params = dict(
        azimuth_samples=int(cfg["grid.azimuth_samples"]),
        elevation_samples=int(cfg["grid.elevation_samples"]),
        elevation_range=(
            np.deg2rad(cfg["grid.elevation_min_deg"]),
            np.deg2rad(cfg["grid.elevation_max_deg"]),
        ),
        distance_samples=int(cfg["grid.distance_samples"]),
        distance_factors=(
            cfg["grid.distance_min_factor"],
            cfg["grid.distance_max_factor"],
        ),
        upsample=int(cfg["renderer.upsample"]),
    )
    cache_path = None
    if cache_dir:
        key = grid_cache_key(
            basis, K,
            azimuth_samples=params["azimuth_samples"],
            elevation_samples=params["elevation_samples"],
            elevation_range=tuple(float(v) for v in params["elevation_range"]),
            distance_samples=params["distance_samples"],
            distance_factors=tuple(float(v) for v in params["distance_factors"]),
            upsample=params["upsample"],
        )
        cache_path = os.path.join(cache_dir, f"grid-{key}.bin")
        if os.path.exists(cache_path):
            return load_grid(cache_path)
    grid = build_template_grid(basis, K, **params)
    if cache_path:
        os.makedirs(cache_dir, exist_ok=True)
        save_grid(cache_path, grid)
    return grid


def cmd_init(args) -> int:
    cfg = _load_config(args.config)
    seq = dataio.load_sequence(args.seq_dir)
    basis = load_basis(args.basis)
    if seq.frames[0].mask is None:
        raise ValueError("the target frame needs a mask for pose retrieval")
    cache_dir = args.grid_cache or os.path.dirname(os.path.abspath(args.basis))
    grid = _grid_for(cfg, basis, seq.intrinsics, cache_dir)
    p0, iou = retrieve_pose(seq.frames[0].mask, grid)
    style = init_style(
        [fr.mask for fr in seq.frames],
        basis,
        mode=cfg["init.style_mode"],
        pose=p0,
        K=seq.intrinsics,
        samples=int(cfg["init.style_samples"]),
        seed=int(cfg["seed"]),
        s_max=cfg["style.s_max"],
        upsample=int(cfg["renderer.upsample"]),
    )
    alpha = init_alpha(
        seq, basis, style, p0,
        upsample=int(cfg["renderer.upsample"]),
        fallback=cfg["init.fallback_alpha"],
    )
    if seq.external is not None:
        deltas = init_motion(p0, seq.external, ScaleFactor(alpha))
    else:
        deltas = [Twist.identity() for _ in range(len(seq) - 1)]
    state = SolverState(p0=p0, deltas=deltas, s=style, alpha=alpha)
    doc = state_to_dict(state)
    doc["basis_file"] = os.path.relpath(
        os.path.abspath(args.basis), os.path.dirname(os.path.abspath(args.output)) or "."
    )
    doc["meta"] = cfg.meta("init", {"retrieval_iou": iou})
    dataio.write_json(args.output, doc)
    print(f"init: retrieval IoU {iou:.3f}, alpha {alpha:.4f} -> {args.output}")
    return 0


def cmd_optimize(args) -> int:
    cfg = _load_config(args.config)
    seq = dataio.load_sequence(args.seq_dir)
    doc = dataio.read_json(args.state)
    state = state_from_dict(doc)
    basis_path = args.basis or os.path.join(
        os.path.dirname(os.path.abspath(args.state)), doc.get("basis_file", "basis.bin")
    )
    basis = load_basis(basis_path)
    out = args.out_dir
    os.makedirs(out, exist_ok=True)

    def checkpoint(st):
        dataio.write_json(os.path.join(out, "checkpoint.json"), state_to_dict(st))

    result = optimize(
        seq, basis, state,
        cfg=cfg.solver_config(),
        obj_cfg=cfg.objective_config(),
        upsample=int(cfg["renderer.upsample"]),
        checkpoint_fn=checkpoint,
    )
    dataio.write_json(os.path.join(out, "state.json"), state_to_dict(result))
    dataio.write_poses(os.path.join(out, "poses.json"), result.global_poses())
    cloud = generate(basis, result.s)
    dataio.write_ply(os.path.join(out, "cloud.ply"), cloud)
    for l, pose in enumerate(result.global_poses()):
        view = render_view(
            cloud.points, exp_rotation(pose.omega), pose.t, seq.intrinsics,
            int(cfg["renderer.upsample"]),
        )
        dataio.write_pfm(os.path.join(out, "invdepth", f"{l:04d}.pfm"), view.invdepth_map)
    _write_loss_csv(os.path.join(out, "loss.csv"), result.loss_history)
    dataio.write_json(
        os.path.join(out, "meta.json"),
        cfg.meta("optimize", {"iterations": result.iter, "alpha": result.alpha}),
    )
    total = result.loss_history[-1].total if result.loss_history else float("nan")
    print(f"optimize: {result.iter} outer iterations, final loss {total:.6g} -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    pred_poses = dataio.read_poses(os.path.join(args.result_dir, "poses.json"))
    pred_maps = _read_pfm_dir(os.path.join(args.result_dir, "invdepth"))
    gt_root = args.gt_dir
    if os.path.isdir(os.path.join(gt_root, "gt")):
        gt_root = os.path.join(gt_root, "gt")
    gt_poses = dataio.read_poses(os.path.join(gt_root, "poses.json"))
    gt_maps = _read_pfm_dir(os.path.join(gt_root, "invdepth"))
    report = evaluate_run(pred_poses, gt_poses, pred_maps, gt_maps)
    os.makedirs(args.out_dir, exist_ok=True)
    dataio.write_json(os.path.join(args.out_dir, "report.json"), report.to_dict())
    if report.histogram:
        lines = ["threshold,count,cumulative_fraction"]
        edges = report.histogram["bin_edges"]
        for edge, count, cum in zip(
            edges[1:], report.histogram["counts"], report.histogram["cumulative"]
        ):
            lines.append(f"{edge!r},{count},{cum!r}")
        dataio.atomic_write_text(os.path.join(args.out_dir, "curves.csv"), "\n".join(lines) + "\n")
    if args.plots:
        _plot_report(report, args.out_dir)
    dataio.write_json(os.path.join(args.out_dir, "meta.json"), cfg.meta("eval"))
    print(
        "eval: depth_error {:.4f}, density {:.3f}, cam location {:.4g}, "
        "cam orientation {:.3f} deg".format(
            report.depth_error, report.density,
            report.cam_location_error, report.cam_orientation_error_deg,
        )
    )
    return 0


def _read_pfm_dir(path):
    maps = []
    i = 0
    while True:
        p = os.path.join(path, f"{i:04d}.pfm")
        if not os.path.exists(p):
            break
        maps.append(dataio.read_pfm(p).astype(float))
        i += 1
    if not maps:
        raise FileNotFoundError(f"no %04d.pfm maps under {path}")
    return maps


def _plot_report(report, out_dir) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    edges = np.array(report.histogram["bin_edges"])
    counts = np.array(report.histogram["counts"])
    cumulative = np.array(report.histogram["cumulative"])
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.bar(edges[:-1], counts, width=np.diff(edges), align="edge", alpha=0.6)
    ax1.set_xlabel("normalized inverse-depth error")
    ax1.set_ylabel("pixel count")
    ax2 = ax1.twinx()
    ax2.plot(edges[1:], cumulative, color="tab:red")
    ax2.set_ylabel("fraction under threshold")
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "depth_error_curve.png"), dpi=120)
    plt.close(fig)


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    seq = dataio.load_sequence(args.seq_dir)
    basis_path = args.basis or os.path.join(args.seq_dir, "basis.bin")
    basis = load_basis(basis_path)
    gt = synth.load_ground_truth(args.seq_dir)
    gt_state = SolverState(
        p0=gt.poses[0],
        deltas=gt.deltas,
        s=StyleVector(gt.style, s_max=cfg["style.s_max"]),
        alpha=gt.alpha,
    )
    magnitudes = [float(m) for m in args.magnitudes.split(",")] if args.magnitudes else list(
        cfg["sweep.magnitudes"]
    )
    seeds = args.seeds if args.seeds is not None else int(cfg["sweep.seeds"])
    rows = basin_sweep(
        seq, basis, gt_state, magnitudes,
        seeds=seeds,
        cfg=cfg.solver_config(),
        obj_cfg=cfg.objective_config(),
        upsample=int(cfg["renderer.upsample"]),
        base_seed=int(cfg["seed"]),
    )
    lines = ["magnitude,mode,runs,converged_fraction,p0_orientation_error_deg,p0_center_error"]
    for r in rows:
        lines.append(
            f"{r['magnitude']!r},{r['mode']},{r['runs']},{r['converged_fraction']!r},"
            f"{r['p0_orientation_error_deg']!r},{r['p0_center_error']!r}"
        )
    dataio.atomic_write_text(args.output, "\n".join(lines) + "\n")
    print(f"sweep: {len(rows)} rows -> {args.output}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spba",
        description="Object-centric semantic photometric bundle adjustment",
    )
    parser.add_argument("--threads", type=int, default=None, help="cap worker parallelism")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sequence")
    p.add_argument("spec", help="synthetic scene spec (JSON)")
    p.add_argument("out_dir")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("fit-basis", help="fit a shape basis from PLY clouds")
    p.add_argument("clouds", nargs="+")
    p.add_argument("--modes", type=int, required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_fit_basis)

    p = sub.add_parser("init", help="pose retrieval, style, scale, and motion init")
    p.add_argument("seq_dir")
    p.add_argument("--basis", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--grid-cache", default=None)
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("optimize", help="run the alternating solver")
    p.add_argument("seq_dir")
    p.add_argument("--state", required=True)
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--basis", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("eval", help="metrics against ground truth")
    p.add_argument("result_dir")
    p.add_argument("gt_dir")
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--plots", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="convergence-basin sweep")
    p.add_argument("seq_dir")
    p.add_argument("--magnitudes", default=None, help="comma-separated degrees")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--basis", default=None)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SpbaError, ValueError, OSError) as exc:
        sys.stderr.write(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n"
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
