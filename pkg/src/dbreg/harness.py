"""Command-line entry points: synthetic dataset generation, two-stage
training, evaluation reports, and a point-to-point ICP baseline.

Every run writes a ``run_manifest.json`` capturing the resolved
configuration, seed, and dataset fingerprint; ``rerun`` re-executes a run
from its manifest and must reproduce the metrics bit-identically.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import dualreg, overlap, training
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .geometry import (CorruptionParams, GeometryError, PairSample, PointCloud,
                       RigidTransform, aggregate_metrics, generate_dataset,
                       overlap_labels, pair_errors, read_ply, write_ply)
from .numerics import ParamStore
from .training import PipelineConfig, TrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_MISSING_CHECKPOINT = 3
EXIT_BAD_CHECKPOINT = 4


# -- ICP baseline ---------------------------------------------------------------


def _kabsch(src: np.ndarray, dst: np.ndarray):
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    r = v @ np.diag([1.0, 1.0, np.sign(np.linalg.det(v @ u.T))]) @ u.T
    return r, dc - r @ sc


def icp_baseline(X: PointCloud, Y: PointCloud, max_iters: int = 50,
                 tol: float = 1e-6) -> RigidTransform:
    """Classic point-to-point alternation from an identity initialization;
    returns the transform reached when the update stalls."""
    r = np.eye(3)
    t = np.zeros(3)
    for _ in range(max_iters):
        moved = X.points @ r.T + t
        d2 = ((moved[:, None, :] - Y.points[None, :, :]) ** 2).sum(axis=2)
        nn = d2.argmin(axis=1)
        r_new, t_new = _kabsch(X.points, Y.points[nn])
        delta = np.abs(r_new - r).max() + np.abs(t_new - t).max()
        r, t = r_new, t_new
        if delta < tol:
            break
    return RigidTransform(r, t)


# -- dataset io -------------------------------------------------------------------


def save_dataset(out_dir, samples, params: CorruptionParams, seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, s in enumerate(samples):
        src = f"pair_{i:04d}_src.ply"
        tgt = f"pair_{i:04d}_tgt.ply"
        write_ply(out / src, s.source)
        write_ply(out / tgt, s.target)
        pairs.append({
            "source": src,
            "target": tgt,
            "R": s.gt.R.reshape(-1).tolist(),
            "t": s.gt.t.tolist(),
            "source_overlap_labels": s.source_overlap_labels.tolist(),
            "target_overlap_labels": s.target_overlap_labels.tolist(),
        })
    manifest = {"seed": seed, "params": params.as_dict(), "pairs": pairs}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def load_dataset(manifest_path):
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    samples = []
    for rec in manifest["pairs"]:
        samples.append(PairSample(
            source=read_ply(path.parent / rec["source"]),
            target=read_ply(path.parent / rec["target"]),
            gt=RigidTransform(np.array(rec["R"]).reshape(3, 3), np.array(rec["t"])),
            source_overlap_labels=np.array(rec["source_overlap_labels"], dtype=np.uint8),
            target_overlap_labels=np.array(rec["target_overlap_labels"], dtype=np.uint8),
        ))
    return samples, manifest


def dataset_fingerprint(manifest_path) -> str:
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()


# -- config resolution --------------------------------------------------------------

NET_KEYS = {"widths", "out_dim", "stages", "k", "heads", "tau", "floor",
            "overlap_blocks", "common_blocks", "branch_blocks",
            "sinkhorn_iters", "sinkhorn_tol"}
TRAIN_KEYS = {"epochs", "batch_size", "lr", "weight_decay", "warmup_frac",
              "lam1", "lam2", "lam3", "eps_trans", "eps_overlap",
              "focal_alpha", "focal_gamma", "grad_clip", "seed"}


def load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    unknown = set(cfg) - NET_KEYS - TRAIN_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def build_configs(cfg: dict, stage: str, seed: int | None):
    from .multires import MultiResConfig
    from .overlap import OverlapConfig
    from .dualreg import RegConfig

    base = PipelineConfig.desk_scale()
    ext = base.overlap.extractor
    ext = MultiResConfig(
        branches=len(cfg["widths"]) if "widths" in cfg else ext.branches,
        stages=cfg.get("stages", ext.stages),
        k=cfg.get("k", ext.k),
        widths=tuple(cfg.get("widths", ext.widths)),
        out_dim=cfg.get("out_dim", ext.out_dim),
    )
    ov = OverlapConfig(extractor=ext,
                       blocks=cfg.get("overlap_blocks", base.overlap.blocks),
                       heads=cfg.get("heads", base.overlap.heads),
                       tau=cfg.get("tau", base.overlap.tau),
                       floor=cfg.get("floor", base.overlap.floor))
    rg = RegConfig(extractor=ext,
                   heads=cfg.get("heads", base.reg.heads),
                   common_blocks=cfg.get("common_blocks", base.reg.common_blocks),
                   branch_blocks=cfg.get("branch_blocks", base.reg.branch_blocks),
                   sinkhorn_iters=cfg.get("sinkhorn_iters", base.reg.sinkhorn_iters),
                   sinkhorn_tol=cfg.get("sinkhorn_tol", base.reg.sinkhorn_tol))
    net = PipelineConfig(overlap=ov, reg=rg)

    train_kwargs = {k: cfg[k] for k in TRAIN_KEYS if k in cfg}
    if seed is not None:
        train_kwargs["seed"] = seed
    return net, TrainConfig(stage=stage, **train_kwargs)


def _net_dict(net: PipelineConfig) -> dict:
    return {
        "widths": list(net.overlap.extractor.widths),
        "out_dim": net.overlap.extractor.out_dim,
        "stages": net.overlap.extractor.stages,
        "k": net.overlap.extractor.k,
        "heads": net.overlap.heads,
        "tau": net.overlap.tau,
        "floor": net.overlap.floor,
        "overlap_blocks": net.overlap.blocks,
        "common_blocks": net.reg.common_blocks,
        "branch_blocks": net.reg.branch_blocks,
        "sinkhorn_iters": net.reg.sinkhorn_iters,
        "sinkhorn_tol": net.reg.sinkhorn_tol,
    }


def write_run_manifest(out_dir, command: str, args: dict, seed: int,
                       dataset_path, metrics: dict, checkpoints: dict) -> Path:
    man = {
        "command": command,
        "args": args,
        "seed": seed,
        "dataset": str(dataset_path) if dataset_path else None,
        "dataset_fingerprint": dataset_fingerprint(dataset_path) if dataset_path else None,
        "checkpoints": {k: str(v) for k, v in checkpoints.items()},
        "metrics": metrics,
    }
    path = Path(out_dir) / "run_manifest.json"
    path.write_text(json.dumps(man, sort_keys=True, indent=1) + "\n")
    return path


def write_curves(out_dir, curves) -> Path:
    path = Path(out_dir) / "curves.csv"
    cols = ["epoch", "split", "loss"]
    extra = sorted({k for row in curves for k in row} - set(cols))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols + extra)
        for row in curves:
            w.writerow([row.get(c, "") for c in cols + extra])
    return path


# -- evaluation --------------------------------------------------------------------


def evaluate(store: ParamStore, samples, net: PipelineConfig,
             no_overlap: bool = False, no_dual: bool = False,
             oracle: bool = False):
    """Per-pair registration errors plus overlap classification counts."""
    per_pair = []
    errors = []
    counts = np.zeros(4, dtype=np.int64)
    have_overlap = any(k.startswith("overlap.") for k in store.names())
    from .numerics import DegenerateGeometryError

    for i, s in enumerate(samples):
        if oracle:
            pred = s.gt
        else:
            try:
                pred, _ = dualreg.register(store, s.source, s.target, net.overlap, net.reg,
                                           no_overlap=no_overlap or not have_overlap,
                                           no_dual=no_dual)
            except DegenerateGeometryError:
                pred = RigidTransform.identity()  # scored at the identity's error
        e = pair_errors(s.gt, pred)
        errors.append(e)
        per_pair.append({
            "pair": i,
            "iso_r": e.iso_rot_deg,
            "iso_t": e.iso_trans,
            "dz": e.euler_diff_deg[0], "dy": e.euler_diff_deg[1], "dx": e.euler_diff_deg[2],
            "dtx": e.trans_diff[0], "dty": e.trans_diff[1], "dtz": e.trans_diff[2],
        })
    if have_overlap:
        for s in samples:
            px, py = overlap.predict_overlap(store, s.source, s.target, net.overlap)
            counts += np.array(training.classification_counts(
                (px.probs >= net.overlap.tau).astype(np.uint8), s.source_overlap_labels))
            counts += np.array(training.classification_counts(
                (py.probs >= net.overlap.tau).astype(np.uint8), s.target_overlap_labels))
    agg = aggregate_metrics(errors)
    metrics = agg.as_dict()
    metrics["overlap"] = (training.classification_metrics(*counts) if have_overlap
                          else {"accuracy": None, "precision": None, "recall": None, "f1": None})
    return metrics, per_pair


def write_per_pair_csv(out_dir, per_pair) -> Path:
    path = Path(out_dir) / "per_pair.csv"
    cols = ["pair", "iso_r", "iso_t", "dz", "dy", "dx", "dtx", "dty", "dtz"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in per_pair:
            w.writerow([row[c] for c in cols])
    return path


# -- subcommands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    params = CorruptionParams(
        n_points=args.points,
        keep_ratio=args.keep_ratio,
        sigma=args.noise_sigma,
        clip=args.noise_clip,
        max_euler_deg=args.max_euler,
        max_trans=args.max_trans,
        eps_o=args.eps_overlap,
        kind=args.kind,
    )
    try:
        samples = generate_dataset(args.seed, args.n_pairs, params)
        manifest = save_dataset(args.out, samples, params, args.seed)
        write_run_manifest(args.out, "gen-data", _public_args(args), args.seed,
                           manifest, {}, {})
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(samples)} pairs to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg_file = load_config(args.config)
        net, tc = build_configs(cfg_file, "overlap" if args.stage == "overlap" else "registration", args.seed)
        if args.epochs is not None:
            tc = TrainConfig(**{**tc.__dict__, "epochs": args.epochs})
        samples, _ = load_dataset(args.data)
        val_samples = load_dataset(args.val_data)[0] if args.val_data else None
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        log = print if not args.quiet else None

        if args.stage == "overlap":
            res = training.train_overlap_stage(samples, tc, net, val=val_samples, log_fn=log)
            ckpt = out / "overlap.ckpt"
            save_checkpoint(ckpt, res.store.subset("overlap."))
        else:
            if args.joint_overlap:
                res = training.train_joint_stage(samples, tc, net, val=val_samples, log_fn=log)
            else:
                if args.no_overlap:
                    ov_params = {}
                else:
                    if not args.overlap_ckpt or not Path(args.overlap_ckpt).exists():
                        print("error: registration stage requires --overlap-ckpt", file=sys.stderr)
                        return EXIT_MISSING_CHECKPOINT
                    ov_params = load_checkpoint(args.overlap_ckpt)
                res = training.train_registration_stage(
                    samples, tc, net, ov_params, val=val_samples, log_fn=log,
                    no_dual=args.no_dual, no_overlap=args.no_overlap)
            ckpt = out / "registration.ckpt"
            save_checkpoint(ckpt, dict(res.store.items()))
        write_curves(out, res.curves)
        write_run_manifest(out, "train", _public_args(args), tc.seed, args.data,
                           res.final_metric, {"checkpoint": ckpt})
        print(f"stage {args.stage} done; checkpoint at {ckpt}")
        return EXIT_OK
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CHECKPOINT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


def _load_store(path) -> ParamStore:
    store = ParamStore()
    for k, v in load_checkpoint(path).items():
        store[k] = v
    return store


def cmd_eval(args) -> int:
    try:
        cfg_file = load_config(args.config)
        net, _ = build_configs(cfg_file, "registration", args.seed)
        samples, _ = load_dataset(args.data)
        store = _load_store(args.checkpoint) if args.checkpoint else ParamStore()
        if args.checkpoint and not args.oracle:
            _check_compat(store, net)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics, per_pair = evaluate(store, samples, net,
                                     no_overlap=args.no_overlap,
                                     no_dual=args.no_dual,
                                     oracle=args.oracle)
        write_per_pair_csv(out, per_pair)
        (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n")
        write_run_manifest(out, "eval", _public_args(args), args.seed or 0, args.data,
                           metrics, {"checkpoint": args.checkpoint or ""})
        print(json.dumps(metrics, sort_keys=True, indent=1))
        return EXIT_OK
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CHECKPOINT
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_CHECKPOINT if "ckpt" in str(e) else EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


def _check_compat(store: ParamStore, net: PipelineConfig) -> None:
    probe = ParamStore()
    rng = np.random.default_rng(0)
    overlap.init_params(probe, net.overlap, rng)
    dualreg.init_params(probe, net.reg, rng)
    for name, arr in probe.items():
        has = any(k.startswith(name.split(".")[0] + ".") for k in store.names())
        if not has:
            continue
        if name not in store:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        if store[name].shape != arr.shape:
            raise CheckpointError(
                f"checkpoint shape mismatch for {name}: {store[name].shape} vs {arr.shape}")


def cmd_icp(args) -> int:
    try:
        samples, _ = load_dataset(args.data)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        errors = []
        per_pair = []
        for i, s in enumerate(samples):
            pred = icp_baseline(s.source, s.target, args.max_iters, args.tol)
            e = pair_errors(s.gt, pred)
            errors.append(e)
            per_pair.append({
                "pair": i, "iso_r": e.iso_rot_deg, "iso_t": e.iso_trans,
                "dz": e.euler_diff_deg[0], "dy": e.euler_diff_deg[1], "dx": e.euler_diff_deg[2],
                "dtx": e.trans_diff[0], "dty": e.trans_diff[1], "dtz": e.trans_diff[2],
            })
        metrics = aggregate_metrics(errors).as_dict()
        write_per_pair_csv(out, per_pair)
        (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n")
        write_run_manifest(out, "icp", _public_args(args), 0, args.data, metrics, {})
        print(json.dumps(metrics, sort_keys=True, indent=1))
        return EXIT_OK
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


def _public_args(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "cmd") and v is not None}


def rerun(manifest_path) -> dict:
    """Re-execute the run recorded in a manifest; returns the new metrics."""
    man = json.loads(Path(manifest_path).read_text())
    argv = [man["command"]]
    skip = {"quiet"}
    for k, v in man["args"].items():
        if k in skip:
            continue
        flag = "--" + k.replace("_", "-")
        if isinstance(v, bool):
            if v:
                argv.append(flag)
        else:
            argv.extend([flag, str(v)])
    code = main(argv)
    if code != EXIT_OK:
        raise RuntimeError(f"rerun exited with {code}")
    out = Path(man["args"]["out"])
    new_man = json.loads((out / "run_manifest.json").read_text())
    return new_man["metrics"]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="dbreg",
                                 description="dual-branch decoupled point cloud registration")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic pair dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-pairs", type=int, default=200)
    g.add_argument("--points", type=int, default=256)
    g.add_argument("--keep-ratio", type=float, default=0.7)
    g.add_argument("--noise-sigma", type=float, default=0.01)
    g.add_argument("--noise-clip", type=float, default=0.05)
    g.add_argument("--max-euler", type=float, default=45.0)
    g.add_argument("--max-trans", type=float, default=1.0)
    g.add_argument("--eps-overlap", type=float, default=0.1)
    g.add_argument("--kind", default="composite",
                   choices=["sphere", "box", "cylinder", "torus", "composite"])
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=["overlap", "reg"])
    t.add_argument("--data", required=True, help="dataset manifest.json")
    t.add_argument("--val-data", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--overlap-ckpt", default=None)
    t.add_argument("--no-dual", action="store_true")
    t.add_argument("--no-overlap", action="store_true")
    t.add_argument("--joint-overlap", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--no-dual", action="store_true")
    e.add_argument("--no-overlap", action="store_true")
    e.add_argument("--oracle", action="store_true",
                   help="inject ground-truth predictions (pipeline test)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("icp", help="point-to-point ICP baseline")
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--max-iters", type=int, default=50)
    i.add_argument("--tol", type=float, default=1e-6)
    i.set_defaults(func=cmd_icp)

    args = ap.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
