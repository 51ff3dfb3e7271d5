"""Command-line front door: dataset preparation, training, evaluation,
analysis, and report emission, driven by JSON config files.

Subcommands: manipulate, featurize, train, eval, analyze, mask.

Reports are deterministic: identical config + inputs produce byte-identical
artifacts (seeded RNG everywhere, ordered reduction, no timestamps in
run.json). Artifacts are written atomically (temp + rename) so crashes never
leave partial outputs behind. Failures exit nonzero with a machine-readable
error JSON on stderr. FEATPROBE_THREADS caps evaluation workers (default 1).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, analysis, imageops, mapping, metrics, synthetic
from .nn import TrainConfig
from .tensorio import (
    ManifestError,
    PairEntry,
    PairManifest,
    Tensor,
    TensorIOError,
    load_manifest,
    load_tensor,
    save_manifest,
    save_tensor,
    validate_manifest,
)


class CliError(Exception):
    """User-facing CLI failure with an error code for the stderr JSON."""

    def __init__(self, message: str, code: str = "error"):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# atomic writes and provenance
# ---------------------------------------------------------------------------

def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_run_record(out_dir: Path, config: dict, seeds: dict) -> None:
    atomic_write_json(out_dir / "run.json", {
        "config_hash": config_hash(config),
        "featprobe_version": __version__,
        "numpy_version": np.__version__,
        "seeds": seeds,
    })


def worker_count() -> int:
    raw = os.environ.get("FEATPROBE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"FEATPROBE_THREADS must be an integer, got {raw!r}",
                       "config")
    return max(1, n)


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

def load_config(path) -> dict:
    import jsonschema

    schema_path = Path(__file__).parent / "schemas" / "experiment.schema.json"
    with open(schema_path, "r", encoding="utf-8") as fh:
        schema = json.load(fh)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", "config")
    except json.JSONDecodeError as exc:
        raise CliError(f"config is not valid JSON: {exc}", "config")
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(config), key=lambda e: e.json_path)
    if errors:
        first = errors[0]
        pointer = "/" + "/".join(str(p) for p in first.absolute_path)
        raise CliError(f"config schema violation at {pointer or '/'}: "
                       f"{first.message}", "config")
    if config.get("permutation_mode") == "applied_tf" and \
            "permutation_kind" not in config:
        raise CliError("permutation_mode=applied_tf requires permutation_kind",
                       "config")
    return config


def train_config_from(config: dict) -> TrainConfig:
    return TrainConfig(**config.get("train", {}))


def resolve_rel(config_path: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else (config_path.parent / p)


def load_validated_manifest(path) -> PairManifest:
    try:
        manifest = load_manifest(path)
    except FileNotFoundError:
        raise CliError(f"manifest not found: {path}", "manifest")
    except ManifestError as exc:
        raise CliError(f"manifest invalid: {exc}", "manifest")
    violations = validate_manifest(manifest)
    if violations:
        raise CliError("manifest violations: " + "; ".join(violations[:10]),
                       "manifest")
    return manifest


# ---------------------------------------------------------------------------
# manipulate
# ---------------------------------------------------------------------------

def build_spec(args, seed: int) -> imageops.ManipulationSpec:
    polygon = []
    if args.polygon:
        for pair in args.polygon.split(";"):
            x, y = pair.split(",")
            polygon.append((int(x), int(y)))
    fill = tuple(int(v) for v in args.fill.split(",")) if args.fill else (255, 0, 0)
    return imageops.ManipulationSpec(
        kind=args.kind, noise_std=args.noise_std, hue_degrees=args.hue_degrees,
        polygon=polygon, fill=fill, seed=seed)


def cmd_manipulate(args) -> int:
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out_dir)
    if not in_dir.is_dir():
        raise CliError(f"input directory not found: {in_dir}", "io")
    images = sorted(p for p in in_dir.iterdir() if p.suffix.lower() == ".png")
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs, skipped = [], []
    for index, path in enumerate(images):
        # one child seed per image, derived from (seed, position)
        child_seed = int(np.random.SeedSequence([args.seed, index]).generate_state(1)[0])
        spec = build_spec(args, child_seed)
        try:
            img = imageops.load_png(path)
            manipulated = imageops.apply_manipulation(img, spec)
        except Exception as exc:  # unreadable file or bad parameters
            skipped.append({"file": str(path), "reason": str(exc)})
            continue
        out_name = f"{path.stem}__{spec.manipulation_id}.png"
        imageops.save_png(manipulated, out_dir / out_name)
        pairs.append({
            "sample_id": path.stem,
            "manipulation_id": spec.manipulation_id,
            "original_image_path": str(path.resolve()),
            "manipulated_image_path": str((out_dir / out_name).resolve()),
        })
    fragment = {"manipulation_id": args.kind, "seed": args.seed,
                "pairs": pairs, "skipped": skipped}
    atomic_write_json(out_dir / "fragment.json", fragment)
    if not images:
        print("warning: no PNG images found; wrote empty fragment", file=sys.stderr)
        return 0
    if not pairs:
        raise CliError("all input images failed; see fragment.json skip report",
                       "manipulate")
    print(f"manipulated {len(pairs)} images ({len(skipped)} skipped) -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# featurize
# ---------------------------------------------------------------------------

def assign_splits(sample_ids: list[str], train_frac: float, val_frac: float,
                  seed: int) -> dict[str, str]:
    order = list(sample_ids)
    np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 3]))).shuffle(order)
    n = len(order)
    n_train = int(round(train_frac * n))
    n_val = int(round(val_frac * n))
    splits = {}
    for i, sid in enumerate(order):
        if i < n_train:
            splits[sid] = "train"
        elif i < n_train + n_val:
            splits[sid] = "val"
        else:
            splits[sid] = "test"
    return splits


def cmd_featurize(args) -> int:
    with open(args.pairs, "r", encoding="utf-8") as fh:
        fragment = json.load(fh)
    featurizer = synthetic.load_featurizer_bundle(args.featurizer)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for pair in fragment["pairs"]:
        sid = pair["sample_id"]
        orig = imageops.load_png(pair["original_image_path"])
        manip = imageops.load_png(pair["manipulated_image_path"])
        f_orig = synthetic.featurize(featurizer, orig)
        f_manip = synthetic.featurize(featurizer, manip)
        orig_name = f"{sid}__orig.npy"
        manip_name = f"{sid}__{pair['manipulation_id'].replace(':', '_')}.npy"
        save_tensor(f_orig.tensor, out_dir / orig_name)
        save_tensor(f_manip.tensor, out_dir / manip_name)
        entries.append(PairEntry(
            original_feature_path=orig_name,
            target_feature_path=manip_name,
            manipulation_id=pair["manipulation_id"],
            sample_id=sid,
            original_image_path=pair["original_image_path"],
            manipulated_image_path=pair["manipulated_image_path"],
        ))
    splits = assign_splits([e.sample_id for e in entries], args.train_frac,
                           args.val_frac, args.seed)
    manifest = PairManifest(entries=entries, splits=splits, base_dir=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    print(f"featurized {len(entries)} pairs -> {out_dir / 'manifest.json'}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    config_path = Path(args.config)
    config = load_config(config_path)
    manifest = load_validated_manifest(resolve_rel(config_path, config["manifest"]))
    cfg = train_config_from(config)
    out_dir = resolve_rel(config_path, config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    train_x, train_y = mapping.load_pair_arrays(manifest, "train")
    perm = None
    if config.get("permutation_mode") == "applied_tf":
        perm = mapping.SpatialPermutation(config["permutation_kind"],
                                          tuple(train_x.shape[2:]))
    normalize_io = config.get("normalize_io")
    if normalize_io is None:
        normalize_io = mapping.default_normalize_io(config["stage"])
    model = mapping.MappingModel(
        config["family"], train_x.shape[1], tuple(train_x.shape[2:]),
        seed=cfg.seed, normalize_io=normalize_io, pre_permutation=perm,
        identity_init=config.get("identity_init", False),
        **config.get("hyper", {}))
    try:
        val_x, val_y = mapping.load_pair_arrays(manifest, "val")
    except ValueError:
        val_x = val_y = None
    history = mapping.train_on_arrays(model, train_x, train_y, cfg, val_x, val_y)

    bundle_dir = out_dir / "model"
    tmp_dir = out_dir / f".model.tmp{os.getpid()}"
    if tmp_dir.exists():
        shutil.rmtree(tmp_dir)
    mapping.save_model_bundle(
        model, tmp_dir,
        train_config={"lambda_mse": cfg.lambda_mse, "lambda_cos": cfg.lambda_cos,
                      "learning_rate": cfg.learning_rate,
                      "weight_decay": cfg.weight_decay, "epochs": cfg.epochs,
                      "batch_size": cfg.batch_size, "seed": cfg.seed},
        final_metrics={"train_loss": history[-1].train_loss,
                       "val_loss": history[-1].val_loss},
        extra_meta={"stage": config["stage"],
                    "backbone": config.get("backbone", "")})
    if bundle_dir.exists():
        shutil.rmtree(bundle_dir)
    os.replace(tmp_dir, bundle_dir)
    mapping.write_history_csv(history, out_dir / "loss_history.csv")
    write_run_record(out_dir, config, {"train_seed": cfg.seed})
    print(f"trained {config['family']} for {cfg.epochs} epochs -> {bundle_dir}")
    print(f"final train_loss={history[-1].train_loss!r} "
          f"val_loss={history[-1].val_loss!r}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _eval_entry(model, manifest, entry, config, stage, backbone, head, stacks_dir,
                input_resolution):
    toggles = {"mdn_cs": True, "masked_mdn_cs": True, "ssim": False,
               "lpips": False, "semantic": False}
    toggles.update(config.get("metrics", {}))
    orig = load_tensor(manifest.resolve(entry.original_feature_path))
    target = load_tensor(manifest.resolve(entry.target_feature_path))
    f_orig = _as_featmap(orig, backbone, stage)
    f_target = _as_featmap(target, backbone, stage)
    mapped = mapping.map_features(model, f_orig)
    record = {
        "sample_id": entry.sample_id,
        "manipulation_id": entry.manipulation_id,
        "stage": stage,
        "model_family": model.family,
    }
    if toggles["mdn_cs"]:
        record["mdn_cs"] = metrics.mdn_cs(mapped, f_target)
    if toggles["masked_mdn_cs"] and entry.original_image_path \
            and entry.manipulated_image_path:
        orig_img = imageops.load_png(manifest.resolve(entry.original_image_path))
        manip_img = imageops.load_png(manifest.resolve(entry.manipulated_image_path))
        mask = metrics.build_change_mask(orig_img, manip_img, f_target.grid,
                                         input_resolution)
        try:
            record["masked_mdn_cs"] = metrics.mdn_cs(mapped, f_target, mask)
        except metrics.EmptyMaskError:
            record["masked_mdn_cs"] = None
            record["masked_mdn_cs_note"] = "empty mask"
    if toggles["ssim"] and entry.original_image_path and entry.manipulated_image_path:
        record["ssim"] = metrics.ssim(
            imageops.load_png(manifest.resolve(entry.original_image_path)),
            imageops.load_png(manifest.resolve(entry.manipulated_image_path)))
    if toggles["lpips"] and stacks_dir is not None:
        a = stacks_dir / f"{entry.sample_id}.orig"
        b = stacks_dir / f"{entry.sample_id}.manip"
        if a.is_dir() and b.is_dir():
            record["lpips"] = metrics.lpips_distance(
                metrics.load_perceptual_stack(a), metrics.load_perceptual_stack(b))
    if toggles["semantic"] and head is not None:
        pm = metrics.classify(head, mapped)
        pt = metrics.classify(head, f_target)
        record["agreement"] = int(np.argmax(pm) == np.argmax(pt))
        record["jsd"] = metrics.jsd(pm, pt)
        if entry.label is not None:
            record["top1"] = int(int(np.argmax(pm)) == entry.label)
    return record


def _as_featmap(tensor: Tensor, backbone: str, stage: str):
    from .tensorio import FeatureMap

    return FeatureMap(tensor, backbone, stage)


def cmd_eval(args) -> int:
    config_path = Path(args.config)
    config = load_config(config_path)
    manifest = load_validated_manifest(resolve_rel(config_path, config["manifest"]))
    out_dir = resolve_rel(config_path, config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = Path(args.bundle) if args.bundle else out_dir / "model"
    model = mapping.load_model_bundle(bundle)
    entries = manifest.split_entries("test")
    if not entries:
        raise CliError("empty split: no test entries in manifest", "empty-split")
    stage = config["stage"]
    backbone = config.get("backbone", "")
    head = None
    if config.get("metrics", {}).get("semantic") and config.get("head_bundle"):
        head = metrics.load_classifier_head(resolve_rel(config_path,
                                                        config["head_bundle"]))
    stacks_dir = None
    if config.get("stacks_dir"):
        stacks_dir = resolve_rel(config_path, config["stacks_dir"])
    input_resolution = config.get("input_resolution", 288)

    def work(entry):
        return _eval_entry(model, manifest, entry, config, stage, backbone, head,
                           stacks_dir, input_resolution)

    threads = worker_count()
    if threads > 1:
        # ordered map keeps the reduction deterministic regardless of timing
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(work, entries))
    else:
        records = [work(e) for e in entries]

    summary: dict = {"num_samples": len(records)}
    for key in ("mdn_cs", "masked_mdn_cs", "ssim", "lpips", "jsd"):
        values = [r[key] for r in records if r.get(key) is not None]
        if values:
            summary[f"mean_{key}"] = float(np.mean(values))
    for key in ("agreement", "top1"):
        values = [r[key] for r in records if r.get(key) is not None]
        if values:
            summary[key] = float(np.mean(values))
    report = {"records": records, "summary": summary}
    atomic_write_json(out_dir / "metrics.json", report)
    write_run_record(out_dir, config, {"train_seed": config.get("train", {}).get("seed", 0)})
    print(f"evaluated {len(records)} test entries -> {out_dir / 'metrics.json'}")
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    bundle = Path(args.bundle)
    model = mapping.load_model_bundle(bundle)
    if model.family != "linear":
        raise CliError("weight analysis is defined for the linear family only",
                       "family")
    dense = model.net.layers[0]
    w = np.asarray(dense.weight.data)
    b = np.asarray(dense.bias.data) if dense.bias is not None \
        else np.zeros(model.channels, dtype=w.dtype)
    manifest = load_validated_manifest(args.features)
    entries = manifest.split_entries(args.split)
    if not entries:
        raise CliError(f"empty split: {args.split!r}", "empty-split")
    batch = np.stack([
        load_tensor(manifest.resolve(e.original_feature_path)).data for e in entries
    ])
    if model.normalize_io:
        batch = batch / np.maximum(mapping.location_norms(batch),
                                   mapping.NORM_EPS)[:, None]
    svd = analysis.svd_analyze(w)
    bias = analysis.bias_analyze(w, b, batch)
    with open(bundle / "meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    record = analysis.analysis_record(
        model_id=bundle.name, stage=meta.get("stage", ""),
        manipulation_id=entries[0].manipulation_id, svd=svd, bias=bias,
        truncate_to=None if args.full_spectrum else 64)
    out = Path(args.out)
    atomic_write_json(out, record)
    print(f"spectral_entropy={svd.spectral_entropy:.4f} "
          f"effective_rank={svd.effective_rank:.1f} "
          f"dominance={bias.input_dominance_ratio:.4f} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# mask
# ---------------------------------------------------------------------------

def cmd_mask(args) -> int:
    manifest = load_validated_manifest(args.features)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for entry in manifest.entries:
        if not (entry.original_image_path and entry.manipulated_image_path):
            continue
        target = load_tensor(manifest.resolve(entry.target_feature_path))
        grid = target.shape[1:]
        mask = metrics.build_change_mask(
            imageops.load_png(manifest.resolve(entry.original_image_path)),
            imageops.load_png(manifest.resolve(entry.manipulated_image_path)),
            grid, args.input_resolution)
        name = f"{entry.sample_id}__mask.npy"
        save_tensor(Tensor(mask.cells.astype(np.float32)), out_dir / name)
        summary[entry.sample_id] = {"file": name, "selected": mask.selected,
                                    "total": int(mask.cells.size)}
    atomic_write_json(out_dir / "masks.json", summary)
    print(f"wrote {len(summary)} masks -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featprobe",
        description="Feature-space mapping toolkit: manipulate images, train "
                    "mapping models, evaluate and analyze them.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manipulate", help="apply one manipulation to a directory "
                                          "of PNG images")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--kind", required=True, choices=imageops.EXECUTABLE_KINDS)
    p.add_argument("--noise-std", type=float, default=40.0)
    p.add_argument("--hue-degrees", type=float, default=60.0)
    p.add_argument("--polygon", help="vertices as 'x,y;x,y;...'")
    p.add_argument("--fill", help="fill color as 'r,g,b'", default="255,0,0")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_manipulate)

    p = sub.add_parser("featurize", help="extract features for image pairs with a "
                                         "featurizer bundle")
    p.add_argument("--pairs", required=True, help="fragment.json from manipulate")
    p.add_argument("--featurizer", required=True, help="featurizer bundle directory")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train-frac", type=float, default=0.7)
    p.add_argument("--val-frac", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a mapping model from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained bundle on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--bundle", help="model bundle dir (default: <output_dir>/model)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="SVD/bias analysis of a linear bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--features", required=True, help="manifest providing sample "
                                                     "features")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--full-spectrum", action="store_true",
                   help="keep all singular values (default truncates to 64)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("mask", help="build change masks for manifest image pairs")
    p.add_argument("--features", required=True, help="manifest with image pairs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--input-resolution", type=int, default=288)
    p.set_defaults(func=cmd_mask)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except (TensorIOError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
