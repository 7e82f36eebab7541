"""Command-line entry point.

Subcommands map one-to-one onto the pipeline stages:

    synth     generate a synthetic labeled fundus corpus
    prep      preprocess raw images onto the grey square canvas
    train     balanced-batch training with checkpoints and history plots
    finetune  continue from a checkpoint on the natural distribution
    predict   per-image grade probabilities from a checkpoint
    evaluate  kappa/accuracy/confusion report (JSON + figure)
    pair      blend left/right-eye probabilities

Flags override config-file values override defaults; the resolved settings are
echoed next to every run's outputs. Exit codes: 0 success, 1 domain error,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    ImageId,
    MalformedIdError,
    load_image,
    load_labels,
    parse_image_id,
    save_image,
)
from .errors import ScreeningError
from .metrics import accuracy, confusion, quadratic_weighted_kappa
from .nnet import build_network
from .pairing import (
    BlendConfig,
    blend_all,
    group_by_patient,
    read_predictions_csv,
    tune_lambda,
    write_predictions_csv,
)
from .prep import PrepConfig, preprocess
from .report import save_confusion_plot, save_history_plot
from .synthgen import SynthConfig, generate_dataset
from .train import (
    ArrayDataset,
    TrainConfig,
    evaluate_model,
    finetune,
    load_checkpoint,
    network_from_checkpoint,
    split_patients,
    train,
)

log = logging.getLogger("retscreen")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def parse_config_file(path) -> dict[str, str]:
    """Flat key = value lines; blank lines and # comments are ignored."""
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScreeningError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip().strip("\"'")
    return values


def _coerce(text: str, kind):
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ScreeningError(f"not a boolean: {text!r}")
    return kind(text)


class Settings:
    """Flag > config-file > default resolution, remembering what was used."""

    def __init__(self, args: argparse.Namespace):
        self.args = vars(args)
        self.config = parse_config_file(args.config) if getattr(args, "config", None) else {}
        self.resolved: dict[str, object] = {}

    def get(self, name: str, default, kind=None):
        kind = kind or (type(default) if default is not None else str)
        value = self.args.get(name)
        if value is None and name in self.config:
            value = _coerce(self.config[name], kind)
        if value is None:
            value = default
        self.resolved[name] = value
        return value


def write_provenance(directory, command: str, resolved: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        f"retscreen = {__version__}",
        f"numpy = {np.__version__}",
        f"command = {command}",
    ]
    lines += [f"{key} = {resolved[key]}" for key in sorted(resolved)]
    (directory / "provenance.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _iter_image_files(directory: Path):
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES:
            yield path


def _load_dataset(images_dir, manifest) -> ArrayDataset:
    images_dir = Path(images_dir)
    images: dict[ImageId, np.ndarray] = {}
    grades: dict[ImageId, int] = {}
    for image_id in manifest.ids():
        path = None
        for suffix in IMAGE_SUFFIXES:
            candidate = images_dir / f"{image_id}{suffix}"
            if candidate.is_file():
                path = candidate
                break
        if path is None:
            log.warning("no image file for labeled id %s, skipping", image_id)
            continue
        images[image_id] = load_image(path)
        grades[image_id] = manifest.entries[image_id]
    if not images:
        raise ScreeningError(f"no labeled images found under {images_dir}")
    sizes = {img.shape for img in images.values()}
    if len(sizes) > 1:
        raise ScreeningError(f"inconsistent image shapes: {sorted(sizes)}")
    (shape,) = sizes
    if shape[0] != shape[1]:
        raise ScreeningError(f"training images must be square, got {shape}")
    return ArrayDataset(images, grades)


def cmd_synth(args) -> int:
    s = Settings(args)
    cfg = SynthConfig(
        n_patients=s.get("patients", 20),
        image_size=s.get("size", 160),
        eye_grade_agreement=s.get("agreement", 0.7),
        seed=s.get("seed", 0),
    )
    out_dir = Path(args.out)
    manifest = generate_dataset(cfg, out_dir)
    write_provenance(out_dir, "synth", s.resolved)
    log.info("wrote %d images and labels.csv to %s", 2 * cfg.n_patients, out_dir)
    print(f"generated {len(manifest)} labeled images in {out_dir}")
    return 0


def cmd_prep(args) -> int:
    s = Settings(args)
    cfg = PrepConfig(
        canvas_size=s.get("canvas", 512),
        row_threshold_frac=s.get("threshold_frac", 0.02),
        sigma_over_radius=s.get("sigma_frac", 1.0 / 30.0),
        subtract_gain=s.get("gain", 4.0),
        mask_area_reduction=s.get("mask_reduction", 0.10),
    )
    in_dir = Path(args.images)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ok = failed = 0
    for path in _iter_image_files(in_dir):
        try:
            image_id = parse_image_id(path.stem)
        except MalformedIdError:
            log.warning("skipping stray file %s (not <patient>_<eye>)", path.name)
            continue
        try:
            img = load_image(path)
            canvas = preprocess(img, cfg, image_id=image_id)
        except ScreeningError as exc:
            log.warning("%s: %s", type(exc).__name__, exc)
            failed += 1
            continue
        save_image(out_dir / f"{image_id}.png", canvas)
        ok += 1
    write_provenance(out_dir, "prep", s.resolved)
    print(f"preprocessed {ok} images ({failed} failed) into {out_dir}")
    if ok == 0:
        raise ScreeningError("no image could be preprocessed")
    return 0


def _train_config(s: Settings, defaults: TrainConfig) -> TrainConfig:
    return TrainConfig(
        epochs=s.get("epochs", defaults.epochs),
        batch_size=s.get("batch_size", defaults.batch_size),
        steps_per_epoch=s.get("steps_per_epoch", defaults.steps_per_epoch, int),
        learning_rate=s.get("lr", defaults.learning_rate),
        seed=s.get("seed", defaults.seed),
        balanced_sampling=defaults.balanced_sampling,
        augment=s.get("augment", defaults.augment, bool),
        eval_every=s.get("eval_every", defaults.eval_every),
        eval_train_samples=s.get("eval_train_samples", defaults.eval_train_samples),
    )


def _split_dataset(dataset: ArrayDataset, val_frac: float, seed: int):
    if val_frac <= 0.0:
        return dataset, None
    train_ids, val_ids = split_patients(dataset.ids(), (1.0 - val_frac, val_frac), seed=seed)
    if not train_ids:
        raise ScreeningError("validation split left no training images")
    return dataset.subset(train_ids), (dataset.subset(val_ids) if val_ids else None)


def cmd_train(args) -> int:
    s = Settings(args)
    cfg = _train_config(s, TrainConfig(epochs=10))
    val_frac = s.get("val_frac", 0.1)
    width_scale = s.get("width_scale", 1.0)
    dense_l2 = s.get("l2", 1e-4)
    manifest = load_labels(args.labels)
    dataset = _load_dataset(args.images, manifest)
    train_set, val_set = _split_dataset(dataset, val_frac, cfg.seed)
    input_size = next(iter(train_set.images.values())).shape[0]
    net = build_network(input_size, width_scale=width_scale, seed=cfg.seed, dense_l2=dense_l2)
    out_dir = Path(args.out)
    write_provenance(out_dir, "train", s.resolved)
    result = train(net, train_set, val_set, cfg, checkpoint_dir=out_dir)
    save_history_plot(result.history, out_dir / "history.png")
    last = result.history[-1] if result.history else None
    if last is not None:
        print(
            f"trained {cfg.epochs} epochs: train kappa {last.train_kappa:.4f}, "
            f"val kappa {last.val_kappa:.4f}, best val kappa {result.best_val_kappa:.4f}"
        )
    print(f"checkpoints and history in {out_dir}")
    return 0


def cmd_finetune(args) -> int:
    s = Settings(args)
    cfg = _train_config(s, TrainConfig(epochs=5))
    lr_scale = s.get("lr_scale", 0.1)
    val_frac = s.get("val_frac", 0.1)
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_labels(args.labels)
    dataset = _load_dataset(args.images, manifest)
    train_set, val_set = _split_dataset(dataset, val_frac, cfg.seed)
    out_dir = Path(args.out)
    write_provenance(out_dir, "finetune", s.resolved)
    result = finetune(ckpt, train_set, val_set, cfg, lr_scale=lr_scale, checkpoint_dir=out_dir)
    save_history_plot(result.history, out_dir / "history.png")
    before = result.baseline_val_kappa
    print(
        "fine-tuned from checkpoint: "
        + (f"val kappa before {before:.4f}, " if before is not None else "")
        + f"best val kappa {result.best_val_kappa:.4f}"
    )
    print(f"checkpoints and history in {out_dir}")
    return 0


def cmd_predict(args) -> int:
    s = Settings(args)
    batch_size = s.get("batch_size", 16)
    ckpt = load_checkpoint(args.checkpoint)
    net = network_from_checkpoint(ckpt)
    size = net.spec.input_size
    in_dir = Path(args.images)
    predictions: dict[ImageId, np.ndarray] = {}
    pending: list[tuple[ImageId, np.ndarray]] = []

    def flush():
        if not pending:
            return
        x = np.stack([img.transpose(2, 0, 1) for _, img in pending])
        probs = net.predict_proba(x, batch_size=batch_size)
        for (image_id, _), p in zip(pending, probs):
            predictions[image_id] = p.astype(np.float64)
        pending.clear()

    for path in _iter_image_files(in_dir):
        try:
            image_id = parse_image_id(path.stem)
        except MalformedIdError:
            log.warning("skipping stray file %s", path.name)
            continue
        img = load_image(path)
        if img.shape[:2] != (size, size):
            log.warning("%s: size %s does not match network input %d, skipping", path.name, img.shape[:2], size)
            continue
        pending.append((image_id, img))
        if len(pending) >= batch_size:
            flush()
    flush()
    if not predictions:
        raise ScreeningError(f"no usable images under {in_dir}")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(out_path, predictions)
    write_provenance(out_path.parent, "predict", s.resolved)
    print(f"wrote {len(predictions)} predictions to {out_path}")
    return 0


def _grades_from_predictions(preds: dict[ImageId, np.ndarray]):
    return {image_id: int(probs.argmax()) for image_id, probs in preds.items()}


def cmd_evaluate(args) -> int:
    s = Settings(args)
    preds = read_predictions_csv(args.pred)
    manifest = load_labels(args.truth)
    shared = sorted(set(preds) & set(manifest.entries))
    if not shared:
        raise ScreeningError("no ids shared between predictions and truth")
    missing = len(preds) - len(shared)
    if missing:
        log.warning("%d predicted ids have no truth label", missing)
    grades = _grades_from_predictions(preds)
    cm = confusion([manifest.entries[i] for i in shared], [grades[i] for i in shared])
    kappa = quadratic_weighted_kappa(cm)
    acc = accuracy(cm)
    print(f"samples:  {cm.n}")
    print(f"kappa:    {kappa:.6f}")
    print(f"accuracy: {acc:.6f}")
    print("confusion (rows true, cols predicted):")
    for row in cm.counts:
        print("  " + " ".join(f"{int(v):6d}" for v in row))
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {"kappa": kappa, "accuracy": acc, "confusion": cm.counts.tolist()}
        (out_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        save_confusion_plot(cm, out_dir / "confusion.png")
        write_provenance(out_dir, "evaluate", s.resolved)
        print(f"report.json and confusion.png in {out_dir}")
    return 0


def cmd_pair(args) -> int:
    s = Settings(args)
    preds = read_predictions_csv(args.pred)
    if args.tune:
        if not args.truth:
            raise ScreeningError("--tune requires --truth")
        manifest = load_labels(args.truth)
        records = group_by_patient(preds, manifest.entries)
        cfg = tune_lambda(records)
        print(f"tuned blend weight: {cfg.lam:.2f}")
    else:
        lam = s.get("lam", None, float)
        if lam is None:
            raise ScreeningError("pass --lam or --tune")
        cfg = BlendConfig(lam)
    blended = blend_all(group_by_patient(preds), cfg)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(out_path, blended)
    write_provenance(out_path.parent, "pair", s.resolved)
    print(f"wrote {len(blended)} blended predictions to {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retscreen",
        description="Retina screening pipeline: synthesize, preprocess, train, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"retscreen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=None)
    p.add_argument("--size", type=int, default=None, help="rendered image size in pixels")
    p.add_argument("--agreement", type=float, default=None, help="left/right grade agreement probability")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="preprocess raw fundus images")
    add_common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--canvas", type=int, default=None)
    p.add_argument("--threshold-frac", dest="threshold_frac", type=float, default=None)
    p.add_argument("--sigma-frac", dest="sigma_frac", type=float, default=None)
    p.add_argument("--gain", type=float, default=None)
    p.add_argument("--mask-reduction", dest="mask_reduction", type=float, default=None)
    p.set_defaults(func=cmd_prep)

    def add_train_flags(p):
        add_common(p)
        p.add_argument("--images", required=True, help="directory of preprocessed images")
        p.add_argument("--labels", required=True, help="labels CSV (image,level)")
        p.add_argument("--out", required=True, help="run directory for checkpoints and history")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--val-frac", dest="val_frac", type=float, default=None)
        p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
        p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)

    p = sub.add_parser("train", help="train the grading network")
    add_train_flags(p)
    p.add_argument("--width-scale", dest="width_scale", type=float, default=None)
    p.add_argument("--l2", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune on the natural class distribution")
    add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lr-scale", dest="lr_scale", type=float, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="write per-image probabilities")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True, help="output predictions CSV")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="kappa/accuracy/confusion report")
    add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pair", help="blend left/right-eye probabilities")
    add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lam", type=float, default=None, help="blend weight in [0, 0.5]")
    p.add_argument("--tune", action="store_true", help="grid-search the weight against --truth")
    p.add_argument("--truth", default=None)
    p.set_defaults(func=cmd_pair)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ScreeningError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"IoError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
