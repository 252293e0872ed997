"""Command-line surface: phantom generation, training, evaluation, prediction,
and fusion-map export.

Configuration is flat JSON with a strict schema: unknown keys are errors, so a
misspelled hyperparameter can never silently fall back to a default. Every
command echoes its effective configuration into the output directory; primary
artifacts are reproducible from that echo plus the seed.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import FusedInputNet, FusionRatio, MultiBranchNet, MultiChannelNet
from .errors import (
    ColearnError,
    ConfigError,
    DataError,
    DivergenceError,
)
from .model import ColearnConfig, ColearnNet
from .metrics import evaluate_slices, write_comparisons_csv, write_metrics_csv
from .pgm import write_pgm
from .phantom import (
    CLASS_NAMES,
    PhantomSpec,
    TumorBlob,
    load_dataset_bundle,
    save_dataset_bundle,
)
from .tensor import Tensor, no_grad
from .training import TrainConfig, make_inputs, predict_probs, train, write_training_log
from .weights_io import load_weights, save_weights

VARIANTS = ("colearn", "mb", "mc", "fs")


@dataclass
class RunConfig:
    """Settings shared by train/eval/predict/export; defaults follow the
    standard architecture and training parameter table."""

    variant: str = "colearn"
    image_size: int = 64
    channels: int = 64
    num_rois: int = 3
    alpha: float = 0.1
    lambda_: float = 0.1
    learning_rate: float = 0.0001
    momentum: float = 0.9
    batch_size: int = 5
    epochs: int = 500
    seed: int = 0
    augment: bool = True
    crop_fraction: float = 0.9
    flip_probability: float = 0.5
    checkpoint_interval: int = 0
    fs_ratio: float = 0.5
    fs_ratios: list = field(default_factory=lambda: [0.3, 0.5, 0.7])
    study_index: int = 0
    slice_index: int = 0

    _JSON_KEYS = {
        "variant", "image_size", "channels", "num_rois", "alpha", "lambda",
        "learning_rate", "momentum", "batch_size", "epochs", "seed", "augment",
        "crop_fraction", "flip_probability", "checkpoint_interval", "fs_ratio",
        "fs_ratios", "study_index", "slice_index",
    }

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @classmethod
    def from_json(cls, raw: dict) -> "RunConfig":
        unknown = set(raw) - cls._JSON_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {("lambda_" if k == "lambda" else k): v for k, v in raw.items()}
        return cls(**kwargs)

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    def model_config(self) -> ColearnConfig:
        return ColearnConfig(input_size=(self.image_size, self.image_size),
                             channels=self.channels, num_rois=self.num_rois,
                             alpha=self.alpha)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs,
                           learning_rate=self.learning_rate, momentum=self.momentum,
                           lambda_=self.lambda_, augment=self.augment,
                           crop_fraction=self.crop_fraction,
                           flip_probability=self.flip_probability, seed=self.seed,
                           checkpoint_interval=self.checkpoint_interval)


def build_model(cfg: RunConfig, variant: str | None = None, ratio: float | None = None):
    variant = variant or cfg.variant
    model_cfg = cfg.model_config()
    if variant == "colearn":
        return ColearnNet(model_cfg, seed=cfg.seed)
    if variant == "mb":
        return MultiBranchNet(model_cfg, seed=cfg.seed)
    if variant == "mc":
        return MultiChannelNet(model_cfg, seed=cfg.seed)
    if variant == "fs":
        return FusedInputNet(model_cfg, seed=cfg.seed,
                             ratio=FusionRatio(ratio if ratio is not None else cfg.fs_ratio))
    raise ConfigError(f"unknown variant {variant!r}")


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")


def _echo_config(out_dir: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    tmp = os.path.join(out_dir, "config-echo.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "config-echo.json"))


def _phantom_spec_from_json(raw: dict, seed_override: int | None) -> PhantomSpec:
    allowed = {"image_size", "studies", "slices_per_study", "tumor_count",
               "peak_suv", "heart_peak_suv", "ct_noise_sigma", "pet_noise_sigma",
               "seed", "tumors"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown phantom spec keys: {sorted(unknown)}")
    kwargs = dict(raw)
    for key in ("tumor_count", "peak_suv", "heart_peak_suv"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    if kwargs.get("tumors"):
        kwargs["tumors"] = [TumorBlob(**t) for t in kwargs["tumors"]]
    if seed_override is not None:
        kwargs["seed"] = seed_override
    try:
        return PhantomSpec(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid phantom spec: {exc}")


def cmd_gen_phantom(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    spec = _phantom_spec_from_json(raw, args.seed)
    save_dataset_bundle(args.out, spec)
    _echo_config(args.out, {"command": "gen-phantom",
                            "spec": json.loads(json.dumps(asdict(spec)))})
    print(f"wrote {spec.studies} studies x {spec.slices_per_study} slices to {args.out}")
    return 0


def _run_config(args) -> RunConfig:
    raw = _load_json(args.config) if args.config else {}
    cfg = RunConfig.from_json(raw)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "variant", None):
        cfg.variant = args.variant
    return cfg


def _load_slices(dataset_dir: str, image_size: int):
    dataset = load_dataset_bundle(dataset_dir)
    for study in dataset:
        for s in study:
            if s.labels.shape != (image_size, image_size):
                raise ConfigError(
                    f"dataset slices are {s.labels.shape}, config expects "
                    f"{image_size}x{image_size}")
    return dataset


def cmd_train(args) -> int:
    cfg = _run_config(args)
    dataset = _load_slices(args.dataset, cfg.image_size)
    slices = [s for study in dataset for s in study]
    model = build_model(cfg)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args.out, {"command": "train", "config": cfg.to_json(),
                            "dataset": os.path.abspath(args.dataset)})
    # on divergence the last checkpoint, if any, stays in place for recovery
    log = train(model, slices, cfg.train_config(), out_dir=args.out)
    write_training_log(os.path.join(args.out, "training_log.csv"), log)
    save_weights(os.path.join(args.out, "final.weights"),
                 model.params.state_arrays(), variant=model.variant)
    print(f"trained {model.variant} for {len(log)} epochs; "
          f"final loss {log[-1].mean_loss:.4f}, accuracy {log[-1].pixel_accuracy:.4f}")
    return 0


def _restore_model(weights_path: str, cfg: RunConfig):
    variant, arrays = load_weights(weights_path)
    ratio = cfg.fs_ratio if variant == "fs" else None
    model = build_model(cfg, variant=variant, ratio=ratio)
    model.params.load_state_arrays(arrays)
    return model


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    dataset = _load_slices(args.dataset, cfg.image_size)
    slices = [s for study in dataset for s in study]
    truth = np.stack([s.labels for s in slices]).astype(np.int64)
    reports = {}
    for path in args.weights:
        model = _restore_model(path, cfg)
        name = model.variant
        if name in reports:
            name = f"{name}_{len(reports)}"
        prob = predict_probs(model, slices)
        reports[name] = evaluate_slices(prob.argmax(axis=-1), truth)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args.out, {"command": "eval", "config": cfg.to_json(),
                            "weights": [os.path.abspath(p) for p in args.weights],
                            "dataset": os.path.abspath(args.dataset)})
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), reports)
    if len(reports) > 1:
        write_comparisons_csv(os.path.join(args.out, "comparisons.csv"), reports)
    print(f"evaluated {len(reports)} run(s) on {len(slices)} slices -> {args.out}")
    return 0


def _select_slice(args, cfg: RunConfig):
    dataset = _load_slices(args.dataset, cfg.image_size)
    if cfg.study_index >= len(dataset):
        raise DataError(f"study_index {cfg.study_index} out of range "
                        f"({len(dataset)} studies)")
    study = dataset[cfg.study_index]
    if cfg.slice_index >= len(study):
        raise DataError(f"slice_index {cfg.slice_index} out of range "
                        f"({len(study)} slices)")
    return study[cfg.slice_index]


def cmd_predict(args) -> int:
    cfg = _run_config(args)
    s = _select_slice(args, cfg)
    model = _restore_model(args.weights, cfg)
    prob = predict_probs(model, [s])[0]
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args.out, {"command": "predict", "config": cfg.to_json(),
                            "weights": os.path.abspath(args.weights)})
    for cid in range(prob.shape[-1]):
        img = np.round(prob[:, :, cid] * 65535).astype(np.uint16)
        name = CLASS_NAMES.get(cid, f"class{cid}")
        write_pgm(os.path.join(args.out, f"prob_{cid}_{name}.pgm"), img)
    write_pgm(os.path.join(args.out, "argmax_labels.pgm"),
              prob.argmax(axis=-1).astype(np.uint8))
    print(f"wrote {prob.shape[-1]} probability maps and argmax labels to {args.out}")
    return 0


def _downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    return labels[::factor, ::factor]


def cmd_export_fusion_maps(args) -> int:
    cfg = _run_config(args)
    s = _select_slice(args, cfg)
    variant, arrays = load_weights(args.weights)
    if variant != "colearn":
        raise ConfigError(f"fusion maps require co-learn weights, got variant {variant!r}")
    model = build_model(cfg, variant="colearn")
    model.params.load_state_arrays(arrays)
    ct, pet, _ = make_inputs("colearn", [s])
    with no_grad():
        _, fusion_maps = model.forward(Tensor(ct), Tensor(pet), mode="infer")
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args.out, {"command": "export-fusion-maps", "config": cfg.to_json(),
                            "weights": os.path.abspath(args.weights)})
    degenerate = []
    hist_rows = []
    nbins = 16
    for u, fmap in enumerate(fusion_maps):
        raw = fmap.data[0]  # [h_s, w_s, 2c]
        factor = s.labels.shape[0] // raw.shape[0]
        scale_labels = _downsample_labels(s.labels, factor)
        for ch in range(raw.shape[-1]):
            channel = raw[:, :, ch]
            lo, hi = float(channel.min()), float(channel.max())
            tag = f"u{u}_c{ch:03d}"
            if hi - lo < 1e-12:
                img = np.zeros(channel.shape, dtype=np.uint16)
                degenerate.append(tag)
            else:
                img = np.round((channel - lo) / (hi - lo) * 65535).astype(np.uint16)
            write_pgm(os.path.join(args.out, f"fusion_{tag}.pgm"), img)
            edges = np.linspace(lo, hi, nbins + 1) if hi > lo else np.array([lo, lo])
            for cid in range(4):
                vals = channel[scale_labels == cid]
                if vals.size == 0:
                    continue
                counts, _ = np.histogram(vals, bins=edges) if hi > lo else \
                    (np.array([vals.size]), None)
                for b, count in enumerate(counts):
                    if count:
                        hist_rows.append((tag, CLASS_NAMES[cid],
                                          edges[b], edges[min(b + 1, len(edges) - 1)],
                                          int(count)))
    with open(os.path.join(args.out, "histograms.csv"), "w") as fh:
        fh.write("channel,class,bin_lo,bin_hi,count\n")
        for row in hist_rows:
            fh.write(f"{row[0]},{row[1]},{row[2]:.6g},{row[3]:.6g},{row[4]}\n")
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump({"units": len(fusion_maps),
                   "channels_per_unit": [m.shape[-1] for m in fusion_maps],
                   "degenerate_channels": degenerate}, fh, indent=1)
    print(f"exported {sum(m.shape[-1] for m in fusion_maps)} fusion channels to {args.out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="colearnseg",
        description="Co-learned multi-modality fusion CNN: phantom data, training, "
                    "evaluation, prediction, fusion-map export.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="generate a synthetic PET-CT study bundle")
    p.add_argument("--config", help="phantom spec JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("train", help="train a fusion network on a study bundle")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", choices=VARIANTS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute detection/segmentation metrics")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--weights", action="append", required=True,
                   help="weight file; repeat to compare runs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write per-class probability maps for one slice")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-fusion-maps",
                       help="write per-channel fusion maps and ROI histograms")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_export_fusion_maps)

    return parser


def run(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    except ColearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
