"""Command-line workflow: gen-data, train, sample, eval, schedule-dump.

Exit codes: 0 success, 2 usage error, 1 runtime error.  The seed comes from
``--seed``, else the ``MODIFF_SEED`` environment variable, else 0.  Any
subcommand accepts ``--config FILE`` with flat ``key = value`` lines (keys
are flag names, with or without leading dashes); explicit flags win.
"""

from __future__ import annotations

import argparse
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .denoiser import Denoiser, DenoiserConfig, load_checkpoint, save_checkpoint
from .diffusion import TrainConfig, TrainingDiverged, loss_trace_csv, sample_images, train
from .manifest import RunManifest, file_sha256, lineage_entry, rng_for
from .metrics import (
    ClassifierExtractor,
    FeatureSet,
    FlattenExtractor,
    diversity,
    fit_gaussian,
    frechet_distance,
    multimodality,
)
from .motion_data import (
    DEFAULT_SKELETON,
    DatasetFormatError,
    LabeledDataset,
    NormStats,
    SkeletonSpec,
    apply_norm,
    compute_norm_stats,
    denormalize,
    denormalize_array,
    images_to_coords,
    load_dataset,
    normalize,
    save_dataset,
    synth_dataset,
)
from .schedule import KINDS, build_schedule, schedule_from_descriptor

log = logging.getLogger("motiondiff")

EXTRACTORS = ("classifier", "flatten")


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MODIFF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"MODIFF_SEED must be an integer, got {env!r}") from None
    return 0


def _snapshot(args) -> dict:
    """Flag values for the manifest; paths reduced to base names."""
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "config"):
            continue
        if isinstance(v, Path):
            v = v.name
        out[k] = v
    return out


def _positive(name, value):
    if value < 1:
        raise UsageError(f"--{name} must be >= 1, got {value}")


# -- gen-data ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    for name in ("classes", "per_class", "frames"):
        _positive(name.replace("_", "-"), getattr(args, name))
    if args.joints < 2:
        raise UsageError(f"--joints must be >= 2, got {args.joints}")
    seed = _seed(args)
    spec = DEFAULT_SKELETON if args.joints == DEFAULT_SKELETON.joint_count else SkeletonSpec.chain(args.joints)
    ds = synth_dataset(
        per_class=args.per_class,
        num_classes=args.classes,
        spec=spec,
        f=args.frames,
        rng=rng_for(seed, "data"),
        jitter=args.jitter,
        phase_spread=args.phase_spread,
    )
    save_dataset(ds, args.out)
    manifest = RunManifest(
        command="gen-data",
        config=_snapshot(args),
        seed=seed,
        dataset_fingerprint=file_sha256(args.out),
        outputs=[args.out.name],
    )
    manifest.write_sidecar(args.out)
    print(f"wrote {len(ds)} sequences ({args.classes} classes, J={args.joints}, f={args.frames}) to {args.out}")
    return 0


# -- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    _positive("batch-size", args.batch_size)
    _positive("T", args.T)
    if args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    if not 0.0 <= args.label_dropout < 1.0:
        raise UsageError("--label-dropout must lie in [0, 1)")
    seed = _seed(args)
    data = load_dataset(args.data)
    if data.norm_stats.applied:
        stats = data.norm_stats
    else:
        data, stats = normalize(data)
    schedule = build_schedule(args.schedule, args.T, s=args.s, beta_clip=(1e-8, args.beta_max),
                              posterior_variance=args.posterior_variance)
    lineage = [lineage_entry("dataset", args.data)]
    if args.resume is not None:
        model, prev = load_checkpoint(args.resume)
        cfg = model.config
        for field_name, have in (("joints", data.joints), ("frames", data.frames), ("num_classes", data.num_classes)):
            if getattr(cfg, field_name) != have:
                raise ValueError(
                    f"dataset/checkpoint mismatch in {field_name}: dataset has {have}, "
                    f"checkpoint has {getattr(cfg, field_name)}"
                )
        if cfg.T != args.T:
            raise ValueError(f"dataset/checkpoint mismatch in T: flag {args.T}, checkpoint {cfg.T}")
        lineage.append(lineage_entry("resumed_checkpoint", args.resume))
    else:
        cfg = DenoiserConfig(
            joints=data.joints,
            frames=data.frames,
            num_classes=data.num_classes,
            T=args.T,
            base_width=args.width,
            depth=args.depth,
            embed_dim=args.embed_dim,
            activation=args.activation,
        )
        model = Denoiser(cfg, rng=rng_for(seed, "init"))
    tcfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        loss_kind=args.loss,
        seed=seed,
        label_dropout=args.label_dropout,
    )

    def progress(epoch, loss):
        if args.verbose:
            print(f"epoch {epoch:3d}  mean loss {loss:.5f}", file=sys.stderr)

    try:
        model, trace = train(model, data, schedule, tcfg, rng=rng_for(seed, "train"),
                             null_label=cfg.null_label, progress=progress)
    except (TrainingDiverged, FloatingPointError) as exc:
        raise RuntimeError(f"training aborted: {exc}") from exc

    loss_csv = args.loss_csv or args.out.with_name(args.out.name + ".loss.csv")
    config = _snapshot(args)
    config["loss_csv"] = loss_csv.name
    config["skeleton_edges"] = [list(e) for e in data.spec.edges]
    manifest = RunManifest(
        command="train",
        config=config,
        seed=seed,
        schedule=schedule.descriptor(),
        norm_stats=stats.as_dict(),
        dataset_fingerprint=lineage[0]["sha256"],
        lineage=lineage,
        outputs=[args.out.name, loss_csv.name],
    )
    save_checkpoint(model, args.out, manifest.to_dict())
    loss_csv.write_text(loss_trace_csv(trace), encoding="utf-8")
    if trace:
        print(f"trained {args.epochs} epochs: loss {trace[0]:.5f} -> {trace[-1]:.5f}; checkpoint {args.out}")
    else:
        print(f"no training epochs; wrote initial checkpoint {args.out}")
    return 0


# -- sample ------------------------------------------------------------------


def _parse_labels(text: str, num_classes: int) -> list[int]:
    if text == "all":
        return list(range(num_classes))
    try:
        labels = [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--label must be an integer, a comma list, or 'all'; got {text!r}") from None
    for c in labels:
        if not 0 <= c < num_classes:
            raise UsageError(f"label out of range [0,{num_classes}): {c}")
    return labels


def cmd_sample(args) -> int:
    _positive("count", args.count)
    seed = _seed(args)
    model, ck_manifest = load_checkpoint(args.checkpoint)
    cfg = model.config
    labels = _parse_labels(args.label, cfg.num_classes)
    schedule = schedule_from_descriptor(ck_manifest["schedule"])
    if schedule.T != cfg.T:
        raise ValueError(f"checkpoint inconsistency: schedule T={schedule.T}, model T={cfg.T}")
    stats = NormStats(**{k: v for k, v in ck_manifest["norm_stats"].items()})
    edges = ck_manifest["config"].get("skeleton_edges")
    spec = SkeletonSpec(cfg.joints, tuple(map(tuple, edges))) if edges else SkeletonSpec.chain(cfg.joints)
    if args.guidance_scale and args.guidance_scale < 0:
        raise UsageError("--guidance-scale must be >= 0")

    rng = rng_for(seed, "sample")
    streams = rng.spawn(len(labels))
    chunks, chunk_labels = [], []
    for c, g in zip(labels, streams):
        imgs = sample_images(
            model, c, args.count, schedule, (3, cfg.joints, cfg.frames), g,
            final_noise=args.final_noise,
            guidance_scale=args.guidance_scale,
            null_label=cfg.null_label,
            clip_x0=args.clip_x0 if args.clip_x0 > 0 else None,
        )
        chunks.append(images_to_coords(imgs))
        chunk_labels += [c] * args.count
    coords = np.concatenate(chunks)
    out_stats = NormStats(stats.mean, stats.std, applied=True)
    if args.denormalize:
        coords = denormalize_array(coords, stats)
        out_stats = NormStats(stats.mean, stats.std, applied=False)
    ds = LabeledDataset(spec, coords, chunk_labels, cfg.num_classes, out_stats)
    save_dataset(ds, args.out)
    manifest = RunManifest(
        command="sample",
        config=_snapshot(args),
        seed=seed,
        schedule=ck_manifest["schedule"],
        norm_stats=ck_manifest["norm_stats"],
        dataset_fingerprint=ck_manifest.get("dataset_fingerprint"),
        lineage=[lineage_entry("checkpoint", args.checkpoint)],
        outputs=[args.out.name],
    )
    manifest.write_sidecar(args.out)
    print(f"wrote {len(ds)} samples (labels {labels}) to {args.out}")
    return 0


# -- eval --------------------------------------------------------------------


def _raw(ds: LabeledDataset) -> LabeledDataset:
    return denormalize(ds) if ds.norm_stats.applied else ds


def _check_compatible(real: LabeledDataset, gen: LabeledDataset):
    for name, a, b in (
        ("joints", real.joints, gen.joints),
        ("frames", real.frames, gen.frames),
        ("num_classes", real.num_classes, gen.num_classes),
    ):
        if a != b:
            raise ValueError(f"geometry mismatch in {name}: real has {a}, generated has {b}")


def evaluate(real: LabeledDataset, generated: LabeledDataset, extractor: str = "classifier",
             seed: int = 0, n_pairs: int = 200, n_pairs_per_class: int = 20) -> list[dict]:
    """Report rows for the real set and the generated set.

    Both sets are mapped into the real set's z-scored space.  The real row's
    FMD compares two random halves of the real set.
    """
    _check_compatible(real, generated)
    raw_real = _raw(real)
    stats = compute_norm_stats(raw_real)
    real_n = apply_norm(raw_real, stats)
    gen_n = apply_norm(_raw(generated), stats)
    rng = rng_for(seed, "metrics")
    if extractor == "classifier":
        ext = ClassifierExtractor(real.joints, real.frames, real.num_classes).fit(real_n, rng)
    elif extractor == "flatten":
        ext = FlattenExtractor(real.joints, real.frames)
    else:
        raise ValueError(f"unknown extractor {extractor!r}; valid: {', '.join(EXTRACTORS)}")
    f_real = FeatureSet(ext.transform(real_n), ext.extractor_id, real_n.labels)
    f_gen = FeatureSet(ext.transform(gen_n), ext.extractor_id, gen_n.labels)
    g_real = fit_gaussian(f_real)

    perm = rng.permutation(len(f_real))
    half = len(perm) // 2
    if half >= 2:
        fmd_real = frechet_distance(
            fit_gaussian(f_real.features[perm[:half]]), fit_gaussian(f_real.features[perm[half:]])
        )
    else:
        fmd_real = float("nan")
    rows = []
    for name, fs, fmd in (
        ("Real", f_real, fmd_real),
        ("Generated", f_gen, frechet_distance(g_real, fit_gaussian(f_gen))),
    ):
        div, div_se = diversity(fs, n_pairs, rng)
        mm, mm_se = multimodality(fs, n_pairs_per_class, rng)
        rows.append({
            "method": name,
            "fmd": fmd,
            "diversity": div,
            "diversity_stderr": div_se,
            "multimodality": mm,
            "multimodality_stderr": mm_se,
            "extractor_id": ext.extractor_id,
            "n_real": len(f_real),
            "n_generated": len(f_gen),
            "seed": seed,
        })
    return rows


REPORT_COLUMNS = (
    "method", "fmd", "diversity", "diversity_stderr", "multimodality",
    "multimodality_stderr", "extractor_id", "n_real", "n_generated", "seed",
)


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(REPORT_COLUMNS) + "\n")
    for r in rows:
        buf.write(",".join(repr(float(r[c])) if isinstance(r[c], float) else str(r[c]) for c in REPORT_COLUMNS) + "\n")
    return buf.getvalue()


def report_table(rows: list[dict]) -> str:
    lines = [f"{'Method':<10} {'FMD↓':>10} {'Diversity↑':>18} {'Multimodality↑':>18}"]
    for r in rows:
        div = f"{r['diversity']:.2f}±{r['diversity_stderr']:.2f}"
        mm = f"{r['multimodality']:.2f}±{r['multimodality_stderr']:.2f}"
        lines.append(f"{r['method']:<10} {r['fmd']:>10.2f} {div:>18} {mm:>18}")
    r = rows[0]
    lines.append(f"extractor={r['extractor_id']} n_real={r['n_real']} n_generated={r['n_generated']} seed={r['seed']}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    seed = _seed(args)
    if args.n_pairs < 1 or args.n_pairs_per_class < 1:
        raise UsageError("pair counts must be >= 1")
    real = load_dataset(args.real)
    gen = load_dataset(args.generated)
    rows = evaluate(real, gen, args.extractor, seed, args.n_pairs, args.n_pairs_per_class)
    args.out.write_text(report_csv(rows), encoding="utf-8")
    table = report_table(rows)
    table_path = args.out.with_suffix(".txt")
    table_path.write_text(table, encoding="utf-8")
    manifest = RunManifest(
        command="eval",
        config=_snapshot(args),
        seed=seed,
        lineage=[lineage_entry("real", args.real), lineage_entry("generated", args.generated)],
        dataset_fingerprint=file_sha256(args.real),
        outputs=[args.out.name, table_path.name],
    )
    manifest.write_sidecar(args.out)
    print(table, end="")
    return 0


# -- schedule-dump -----------------------------------------------------------


def cmd_schedule_dump(args) -> int:
    _positive("T", args.T)
    if args.s <= 0:
        raise UsageError("--s must be positive")
    sched = build_schedule(args.kind, args.T, s=args.s, beta_clip=(1e-8, args.beta_max),
                           posterior_variance=args.posterior_variance)
    text = sched.to_csv()
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text, encoding="utf-8")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="motiondiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="flat key=value file; flags override")
        p.add_argument("--seed", type=int, default=None, help="master seed (fallback: $MODIFF_SEED, then 0)")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic labeled motion dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--joints", type=int, default=8)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--jitter", type=float, default=0.05)
    p.add_argument("--phase-spread", type=float, default=0.3)

    p = add("train", cmd_train, "train the noise predictor on a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--loss-csv", type=Path, default=None)
    p.add_argument("--resume", type=Path, default=None, help="continue from a checkpoint")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--loss", choices=("l1", "l2"), default="l1")
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--activation", choices=("silu", "linear"), default="silu")
    p.add_argument("--schedule", choices=KINDS, default="cosine")
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--s", type=float, default=0.008)
    p.add_argument("--beta-max", type=float, default=0.999)
    p.add_argument("--posterior-variance", action="store_true")
    p.add_argument("--label-dropout", type=float, default=0.0)
    p.add_argument("--verbose", action="store_true")

    p = add("sample", cmd_sample, "draw action-conditioned samples from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--label", required=True, help="class id, comma list, or 'all'")
    p.add_argument("--count", type=int, default=10, help="samples per label")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--guidance-scale", type=float, default=0.0)
    p.add_argument("--clip-x0", type=float, default=5.0, help="bound on the implied clean sample; 0 disables")
    p.add_argument("--final-noise", action="store_true", help="add noise at the last reverse step too")
    p.add_argument("--denormalize", action="store_true")

    p = add("eval", cmd_eval, "FMD / Diversity / Multimodality report")
    p.add_argument("--real", type=Path, required=True)
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--extractor", choices=EXTRACTORS, default="classifier")
    p.add_argument("--n-pairs", type=int, default=200)
    p.add_argument("--n-pairs-per-class", type=int, default=20)
    p.add_argument("--out", type=Path, required=True, help="report CSV path")

    p = add("schedule-dump", cmd_schedule_dump, "print a noise schedule as CSV")
    p.add_argument("--kind", choices=KINDS, default="cosine")
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--s", type=float, default=0.008)
    p.add_argument("--beta-max", type=float, default=0.999)
    p.add_argument("--posterior-variance", action="store_true")
    p.add_argument("--out", type=Path, default=None)
    return parser, subs


def _read_config(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def _apply_config(sub: argparse.ArgumentParser, argv, args):
    values = _read_config(args.config)
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"{args.config}: unknown key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            value = action.type(raw) if action.type else raw
            if action.choices and value not in action.choices:
                raise UsageError(f"{args.config}: {key} must be one of {list(action.choices)}")
            defaults[key] = value
        action.required = False
    sub.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config is not None:
            _apply_config(subs[args.command], argv, args)
            args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        subs[args.command].print_usage(sys.stderr)
        print(f"{subs[args.command].prog}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, DatasetFormatError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
