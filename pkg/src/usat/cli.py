"""``usat`` command line: synth, pair, pretrain, finetune, evaluate, reconstruct, encviz.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import encodings as enc
from .checkpoint import load_checkpoint
from .config import CliConfig, schema_text
from .data import SynthConfig, load_dataset, pair_stores, write_synthetic
from .errors import USatError, ValidationError
from .imageio import to_uint8, write_pgm, write_ppm
from .masking import MaskPlan, batch_masks
from .patch_embed import unpatchify
from .training import batch_patches, finetune, pretrain

log = logging.getLogger("usat")


class _Parser(argparse.ArgumentParser):
    """Usage errors print the config schema and exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n\nconfig schema (defaults):\n{schema_text()}\n")
        sys.exit(1)


def _csv(text: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def _common(p: argparse.ArgumentParser, *, data=True, out=True, ckpt=False):
    p.add_argument("--config", type=Path, help="JSON config file (sections geometry/encodings/model/run/data)")
    p.add_argument("--seed", type=int, help="root seed for all randomness")
    if out:
        p.add_argument("--out", type=Path, required=True, help="output directory")
    if data:
        p.add_argument("--data", type=Path, required=True, help="dataset store directory")
    if ckpt:
        p.add_argument("--ckpt", type=Path, help="checkpoint directory")
    p.add_argument("--bands", type=_csv, help="comma-separated band names, bare (Red) or qualified (sentinel2/Red)")
    p.add_argument("--sensors", type=_csv, help="comma-separated sensor names")
    p.add_argument("--mask-ratio", type=float, help="fraction of tokens masked per spectral group")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--preset", choices=("tiny", "vitl"), help="encoder size preset")
    p.add_argument("--group-index-mode", choices=enc.GROUP_INDEX_MODES, help="group encoding indices")
    p.add_argument("--workers", type=int, help="parallel workers for data preparation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="usat", description="Multi-sensor masked-autoencoder toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic multi-sensor dataset store")
    _common(p, data=False)
    p.add_argument("--n", type=int, help="number of samples")

    p = sub.add_parser("pair", help="pair a fine-sensor store with a coarse-sensor store")
    _common(p, data=False)
    p.add_argument("--fine", type=Path, required=True, help="store holding the fine-sensor records")
    p.add_argument("--coarse", type=Path, required=True, help="store holding the coarse-sensor records")

    p = sub.add_parser("pretrain", help="masked-autoencoder pre-training")
    _common(p)

    p = sub.add_parser("finetune", help="fine-tune or linear-probe a checkpoint (random init without --ckpt)")
    _common(p, ckpt=True)
    p.add_argument("--linear-probe", action="store_true", help="train only the classifier head")

    p = sub.add_parser("evaluate", help="metrics JSON: micro/macro AP (multi-label) or accuracy (single-label)")
    _common(p, out=False, ckpt=True)
    p.add_argument("--out", type=Path, help="write metrics JSON here instead of stdout")
    p.add_argument("--split", default="val", help="dataset split to score (default val)")

    p = sub.add_parser("reconstruct", help="write masked | predicted | true image triptychs")
    _common(p, ckpt=True)
    p.add_argument("--n", type=int, default=4, help="number of samples to render")
    p.add_argument("--split", default="val", help="dataset split to draw samples from")

    p = sub.add_parser("encviz", help="cosine-similarity maps of coarse encodings against the reference grid")
    _common(p, data=False, ckpt=True)
    p.add_argument("--group", type=int, help="coarse group id (default: the coarsest group)")
    return parser


def _overrides(args) -> dict:
    run, model, enc_ = {}, {}, {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.bands:
        run["bands"] = args.bands
    if args.sensors:
        run["sensors"] = args.sensors
    if args.mask_ratio is not None:
        run["mask_ratio"] = args.mask_ratio
    if args.epochs is not None:
        run["epochs"] = args.epochs
    if args.preset:
        model["preset"] = args.preset
    if args.group_index_mode:
        # pre-training keeps configured ids; the flag steers the fine-tune renumbering
        run["group_index_mode"] = args.group_index_mode
        if args.command != "finetune":
            enc_["group_index_mode"] = args.group_index_mode
    data = {}
    if getattr(args, "n", None) is not None and args.command == "synth":
        data["n_samples"] = args.n
    if args.workers is not None:
        data["workers"] = args.workers
    out = {"run": run, "model": model, "encodings": enc_, "data": data}
    return {k: v for k, v in out.items() if v}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: CliConfig) -> dict:
    d = cfg["data"]
    sc = SynthConfig(int(d["n_classes"]), int(d["max_classes_per_scene"]), float(d["smoothness_m"]),
                     float(d["sharpness"]), float(d["noise"]), float(d["val_fraction"]))
    m = write_synthetic(args.out, cfg["run"]["seed"], int(d["n_samples"]), cfg.geometry(), sc, int(d["workers"]))
    return {"samples": len(m["samples"]), "records": len(m["records"]), "out": str(args.out)}


def cmd_pair(args, cfg: CliConfig) -> dict:
    m = pair_stores(args.fine, args.coarse, args.out, cfg.geometry())
    return {"samples": len(m["samples"]), "out": str(args.out)}


def cmd_pretrain(args, cfg: CliConfig) -> dict:
    ds = load_dataset(args.data)
    geometry = cfg.geometry()
    if abs(ds.footprint_m - geometry.footprint.image_footprint_m) > 1e-9:
        geometry = geometry.refit(ds.footprint_m)
    spec = cfg.model_spec(geometry)
    run = cfg.run_config("pretrain")
    args.out.mkdir(parents=True, exist_ok=True)
    log_file = args.out / "train.log"
    log_file.write_text("")
    res = pretrain(ds, spec, run, out_dir=args.out, log_file=log_file)
    return {"steps": len(res.losses), "final_loss": res.losses[-1] if res.losses else None, "out": str(args.out)}


def cmd_finetune(args, cfg: CliConfig) -> dict:
    ds = load_dataset(args.data)
    run = cfg.run_config("finetune")
    if args.linear_probe:
        run.linear_probe = True
    source = None
    base = None
    if args.ckpt:
        source, _ = load_checkpoint(args.ckpt)
    else:
        base = cfg.model_spec()
    args.out.mkdir(parents=True, exist_ok=True)
    log_file = args.out / "train.log"
    log_file.write_text("")
    res = finetune(ds, run, source=source, base_spec=base, task=cfg["model"]["task"], out_dir=args.out,
                   log_file=log_file)
    return {"best": res.best, "transferred": len(res.transferred), "out": str(args.out)}


def cmd_evaluate(args, cfg: CliConfig) -> dict:
    from .training import evaluate

    if not args.ckpt:
        raise ValidationError("evaluate needs --ckpt")
    ds = load_dataset(args.data)
    model, manifest = load_checkpoint(args.ckpt)
    same_classes = manifest.get("classes") == ds.classes and model.spec.n_classes == len(ds.classes)
    wanted = model.spec.geometry.resolve_bands(args.bands or cfg["run"]["bands"], args.sensors or cfg["run"]["sensors"])
    if same_classes and tuple(wanted) == tuple(model.spec.band_keys):
        metrics = evaluate(model, ds, args.split)
        metrics["protocol"] = "classifier"
    else:
        # no usable classifier: fit a linear probe on the train split, score on the requested split
        run = cfg.run_config("finetune")
        run.linear_probe = True
        run.eval_split = args.split
        res = finetune(ds, run, source=model, task=model.spec.task)
        metrics = {k: v for k, v in res.best.items() if k != "epoch"}
        metrics["protocol"] = "linear_probe"
    metrics["bands"] = list(wanted)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(metrics, indent=1, sort_keys=True))
    else:
        print(json.dumps(metrics, indent=1, sort_keys=True))
    return metrics


def _panel(values: np.ndarray, lo, hi) -> np.ndarray:
    return np.stack([to_uint8(values[..., c], lo[c], hi[c]) for c in range(values.shape[-1])], axis=-1)


def cmd_reconstruct(args, cfg: CliConfig) -> dict:
    if not args.ckpt:
        raise ValidationError("reconstruct needs --ckpt")
    ds = load_dataset(args.data)
    model, _ = load_checkpoint(args.ckpt)
    samples = ds.split(args.split) or ds.samples
    samples = samples[:max(1, args.n)]
    layout = model.layout(model.spec.geometry.resolve_bands(args.bands or cfg["run"]["bands"],
                                                            args.sensors or cfg["run"]["sensors"]))
    ratio = args.mask_ratio if args.mask_ratio is not None else cfg["run"]["mask_ratio"]
    plan = MaskPlan.build(layout.groups, ratio, cfg["run"]["seed"])
    patches = batch_patches(ds, samples, layout)
    mask = batch_masks(plan, range(len(samples)))
    _, preds, _ = model.mae_forward(patches, mask, layout)
    args.out.mkdir(parents=True, exist_ok=True)
    written = []
    for gi, ((g, keys), sl) in enumerate(zip(zip(layout.groups, layout.bands), layout.slices())):
        s2 = g.patch_size ** 2
        order = {b: j for j, b in enumerate(g.band_names)}
        names = [k.split("/", 1)[1] for k in keys]
        rgb = [b for b in ("Red", "Green", "Blue") if b in names]
        show = rgb if len(rgb) == 3 else names[:1]
        true = np.stack([patches[f"{keys[0].split('/', 1)[0]}/{b}"] for b in show], axis=-1)  # [B, n, s2, C]
        pred = np.stack([preds[gi][..., order[b] * s2:(order[b] + 1) * s2] for b in show], axis=-1)
        if model.spec.normalize_target:
            # predictions live in per-token standardized units; map back with the true token statistics
            for c in range(len(show)):
                mu = true[..., c].mean(axis=-1, keepdims=True)
                sd = np.sqrt(true[..., c].var(axis=-1, keepdims=True) + 1e-6)
                pred[..., c] = pred[..., c] * sd + mu
        m = mask[:, sl][..., None, None]
        masked = np.where(m, np.nan, true)
        filled = np.where(m, pred, true)
        for i, s in enumerate(samples):
            imgs = [unpatchify(np.moveaxis(a[i], -1, 0), g.patch_count, g.patch_size) for a in (masked, filled, true)]
            imgs = [np.moveaxis(x, 0, -1) for x in imgs]
            lo = [float(np.min(imgs[2][..., c])) for c in range(len(show))]
            hi = [float(np.max(imgs[2][..., c])) for c in range(len(show))]
            panels = [_panel(np.nan_to_num(x, nan=lo[0] if len(show) == 1 else 0.0), lo, hi) for x in imgs]
            panels[0][np.isnan(imgs[0]).any(axis=-1)] = 0
            sep = np.full((panels[0].shape[0], 2, len(show)), 255, dtype=np.uint8)
            trip = np.concatenate([panels[0], sep, panels[1], sep, panels[2]], axis=1)
            stem = args.out / f"{s.id}_group{g.id}"
            path = write_ppm(stem.with_suffix(".ppm"), trip) if len(show) == 3 else write_pgm(
                stem.with_suffix(".pgm"), trip[..., 0])
            written.append(path.name)
    return {"images": written, "out": str(args.out)}


def cmd_encviz(args, cfg: CliConfig) -> dict:
    if args.ckpt:
        spec = load_checkpoint(args.ckpt)[0].spec
        geometry, params = spec.geometry, spec.encodings
    else:
        geometry, params = cfg.geometry(), cfg.encodings()
    groups = geometry.groups
    if args.group is not None:
        group = geometry.group(args.group)
    else:
        group = min(groups, key=lambda g: (g.patch_count, -g.gsd, g.id))
    coarse = enc.superpositional(group, geometry, params) if params.superpositional else enc.vanilla(
        group, geometry, params)
    ref = enc.reference_encodings(geometry, params)
    sims = enc.cosine_similarity_map(coarse, ref)
    args.out.mkdir(parents=True, exist_ok=True)
    p = group.patch_count
    for n in range(sims.shape[0]):
        i, j = divmod(n, p)
        write_pgm(args.out / f"sim_{i}_{j}.pgm", to_uint8(sims[n], -1.0, 1.0))
    return {"group": group.id, "maps": int(sims.shape[0]), "out": str(args.out)}


COMMANDS = {
    "synth": cmd_synth,
    "pair": cmd_pair,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "reconstruct": cmd_reconstruct,
    "encviz": cmd_encviz,
}


def _setup_logging():
    level = os.environ.get("USAT_LOG", "info").lower()
    if level not in ("info", "debug"):
        level = "info"
    logging.basicConfig(level=logging.DEBUG if level == "debug" else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging()
    try:
        cfg = CliConfig.load(args.config, _overrides(args))
        print(f"seed={cfg['run']['seed']}", flush=True)
        result = COMMANDS[args.command](args, cfg)
        if args.command != "evaluate":
            log.info("%s done: %s", args.command, json.dumps(result, default=str))
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (USatError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
