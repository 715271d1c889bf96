"""``semaim`` command line: pretrain, gen-data, visualize-order, verify, probe.

Configuration is an INI file with ``[model]``, ``[train]``, ``[target]`` and
``[data]`` sections whose keys are the fields of the matching config classes.
Command-line flags override file values. Exit codes: 0 success, 1 runtime or
verification failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from semaim import __version__
from semaim import imageio
from semaim import numerics as nx
from semaim import ordergen as og
from semaim.data import SyntheticSpec, generate_blob_dataset, load_image, load_manifest, oracle_teacher_features
from semaim.errors import ContractError
from semaim.model import ModelConfig, SemAIM, cls_features, embed, frozen_similarity_pass, patchify
from semaim.objective import TargetSpec
from semaim.probes import ProbeConfig, knn_probe, linear_probe, split_indices
from semaim.train import TrainConfig, load_checkpoint, train
from semaim.verify import SUITES, run_suite

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "target": TargetSpec, "data": SyntheticSpec}
_NESTED = {"model", "target"}  # TrainConfig fields filled from their own sections


class ConfigError(Exception):
    """Invalid configuration; always maps to exit code 2."""


def _parse_scalar(text: str, kind: str, key: str):
    text = text.strip()
    if kind.endswith("| None"):
        if text.lower() in ("", "none", "null"):
            return None
        kind = kind[: -len("| None")].strip()
    try:
        if kind == "bool":
            lowered = text.lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return lowered in ("1", "true", "yes", "on")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple["):
            inner = kind[len("tuple[") : -1].split(",")[0].strip()
            parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
            return tuple(_parse_scalar(p, inner, key) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    return text


def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(cls) if f.name not in _NESTED}


def _section_values(section: str, items: dict[str, str]) -> dict:
    types = _field_types(SECTIONS[section])
    out = {}
    for key, text in items.items():
        if key not in types:
            valid = ", ".join(sorted(types))
            raise ConfigError(f"unknown key {section}.{key}; valid keys: {valid}")
        out[key] = _parse_scalar(text, types[key], f"{section}.{key}")
    return out


@dataclass
class RunConfig:
    """Everything a command needs, fully resolved and validated."""

    train: TrainConfig
    data: SyntheticSpec
    seed: int
    deterministic: bool
    out: Path
    values: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "data": dataclasses.asdict(self.data),
            "seed": self.seed,
            "deterministic": self.deterministic,
            "out": str(self.out),
        }


def resolve_config(path, overrides: dict[str, dict], seed=None, deterministic=False, out=None) -> RunConfig:
    """Merge file values with ``overrides`` (section -> key -> text) and validate."""
    raw: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as handle:
                parser.read_file(handle)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except configparser.Error as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; valid: {', '.join(SECTIONS)}")
            raw[section].update(parser[section])
    for section, items in overrides.items():
        raw[section].update({k: v for k, v in items.items() if v is not None})

    values = {name: _section_values(name, items) for name, items in raw.items()}
    if seed is not None:
        values["train"]["seed"] = seed
    try:
        model = ModelConfig(**values["model"])
        target = TargetSpec(**values["target"])
        data_values = dict(values["data"])
        data_values.setdefault("image_size", model.image_size[0])
        data = SyntheticSpec(**data_values)
        cfg = TrainConfig(model=model, target=target, **values["train"])
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if model.image_size != (data.image_size, data.image_size):
        raise ConfigError(
            f"data.image_size {data.image_size} does not match model.image_size {model.image_size}"
        )
    return RunConfig(cfg, data, cfg.seed, deterministic, Path(out or "runs"), values)


def _apply_runtime(deterministic: bool) -> None:
    env = os.environ.get("SEMAIM_THREADS")
    if env is not None and (not env.isdigit() or int(env) < 1):
        raise ConfigError(f"SEMAIM_THREADS must be a positive integer, got {env!r}")
    nx.set_deterministic(deterministic)


def _overrides(args, mapping: dict[str, tuple[str, str]]) -> dict[str, dict]:
    out: dict[str, dict] = {name: {} for name in SECTIONS}
    for dest, (section, key) in mapping.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[section][key] = str(value)
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}] in --set {item!r}")
        out[section][key] = value
    return out


def _resolve(args, mapping=None) -> RunConfig:
    if getattr(args, "order", None) is not None:
        try:
            og.OrderStrategy.parse(args.order)
        except ContractError as exc:
            raise ConfigError(f"--order: {exc}") from None
    run = resolve_config(args.config, _overrides(args, mapping or {}), args.seed, args.deterministic, args.out)
    _apply_runtime(args.deterministic)
    return run


# pretrain ------------------------------------------------------------------

_PRETRAIN_FLAGS = {
    "order": ("train", "order"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "base_lr": ("train", "base_lr"),
    "max_steps": ("train", "max_steps"),
    "dtype": ("train", "dtype"),
    "checkpoint_every": ("train", "checkpoint_every"),
}


def cmd_pretrain(args) -> int:
    run = _resolve(args, _PRETRAIN_FLAGS)
    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    if args.dataset:
        dataset = load_manifest(args.dataset)
        dataset_path = str(args.dataset)
    else:
        dataset = generate_blob_dataset(run.data, out / "data", split="train")
        dataset_path = str(out / "data" / "train.manifest")

    manifest = {"command": "pretrain", "version": __version__, "dataset": dataset_path, **run.to_dict()}
    manifest["resume"] = str(args.resume) if args.resume else None
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    result = train(run.train, dataset, out, resume=args.resume)
    final = result.losses[-1] if result.losses else float("nan")
    print(f"trained {result.steps} steps ({run.train.order}); final loss {final:.6g}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


# gen-data ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    flags = {"count": ("data", "count"), "image_size": ("data", "image_size"), "num_classes": ("data", "num_classes")}
    run = _resolve(args, flags)
    data = run.data if args.seed is None else dataclasses.replace(run.data, seed=args.seed)
    manifest = generate_blob_dataset(data, run.out, split=args.split)
    print(f"wrote {len(manifest)} images to {run.out} ({args.split}.manifest)")
    return EXIT_OK


# visualize-order -----------------------------------------------------------


def _load_visual_input(args, run: RunConfig):
    if args.image is None:
        raise ConfigError("visualize-order needs --image (a PPM path or an id from --dataset)")
    candidate = Path(args.image)
    if candidate.suffix.lower() == ".ppm" or candidate.exists():
        return candidate.stem, load_image(candidate)
    if not args.dataset:
        raise FileNotFoundError(f"image {args.image} not found and no --dataset given to look up the id")
    dataset = load_manifest(args.dataset)
    record = dataset.find(args.image)
    return record.image_id, load_image(dataset.image_path(record))


def _similarity(image: np.ndarray, model: SemAIM | None, patch_size: int) -> og.SimilarityMap:
    if model is None:
        feats = oracle_teacher_features(image, patch_size)
        grid = (image.shape[0] // patch_size, image.shape[1] // patch_size)
        return og.similarity_map(feats.mean(axis=0), feats, grid)
    tokens = embed(patchify(image, patch_size).astype(model.dtype), model)
    z_cls, z_patches = frozen_similarity_pass(tokens, model)
    return og.similarity_map(z_cls, z_patches, model.config.grid)


def _center_marker(image: np.ndarray, center: tuple[int, int], patch_size: int) -> np.ndarray:
    rgb = np.repeat(image, 3, axis=2) if image.shape[2] == 1 else image[..., :3].copy()
    y0, x0 = center[0] * patch_size, center[1] * patch_size
    y1, x1 = y0 + patch_size - 1, x0 + patch_size - 1
    red = np.array([1.0, 0.0, 0.0])
    rgb[y0, x0 : x1 + 1] = rgb[y1, x0 : x1 + 1] = red
    rgb[y0 : y1 + 1, x0] = rgb[y0 : y1 + 1, x1] = red
    return rgb


def rank_map(perm: og.Permutation, grid: tuple[int, int]) -> np.ndarray:
    """Byte map over the patch grid: 255 for the first prediction, 0 for the last."""
    ranks = perm.ranks().reshape(grid).astype(np.float64)
    n = len(perm)
    if n == 1:
        return np.full(grid, 255, dtype=np.uint8)
    return np.rint(255.0 * (1.0 - ranks / (n - 1))).astype(np.uint8)


def cmd_visualize_order(args) -> int:
    run = _resolve(args)
    model = None
    patch_size = run.train.model.patch_size
    lam = run.train.model.order_lambda
    if not args.oracle_teacher:
        if not args.checkpoint:
            raise ConfigError("visualize-order needs --checkpoint or --oracle-teacher")
        model = load_checkpoint(args.checkpoint).model
        patch_size, lam = model.config.patch_size, model.config.order_lambda
    image_id, image = _load_visual_input(args, run)
    if image.shape[0] % patch_size or image.shape[1] % patch_size:
        raise ContractError(f"image {image.shape[:2]} is not divisible by patch size {patch_size}")
    if model is not None and tuple(image.shape[:2]) != model.config.image_size:
        raise ContractError(f"image {image.shape[:2]} does not match checkpoint size {model.config.image_size}")

    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    sim = _similarity(image, model, patch_size)
    filtered = og.mean_filter_3x3(sim)
    center = og.find_center(filtered)
    for suffix, field_map in (("simmap", sim), ("simmap_filtered", filtered)):
        imageio.write_ppm(out / f"{image_id}_{suffix}.ppm", imageio.upsample(imageio.heatmap(field_map.values), patch_size))
    imageio.write_ppm(out / f"{image_id}_center.ppm", _center_marker(image, center, patch_size))

    summary = {"image": image_id, "center": list(center), "grid": list(sim.grid), "orders": {}}
    strategies = args.strategy or [s.value for s in og.OrderStrategy]
    for index, name in enumerate(strategies):
        strategy = og.OrderStrategy.parse(name)
        rng = np.random.default_rng([run.seed, index])
        c = og.order_centerness(strategy, sim.flat.size, rng, sim, lam)
        perm = og.permutation_from_centerness(c)
        ranks = rank_map(perm, sim.grid)
        imageio.write_pgm(out / f"{image_id}_{strategy.value}.pgm", imageio.upsample(ranks, patch_size))
        imageio.write_ppm(
            out / f"{image_id}_{strategy.value}_heat.ppm", imageio.upsample(imageio.PALETTE[ranks], patch_size)
        )
        summary["orders"][strategy.value] = perm.order.tolist()
        print(f"{strategy.value}: first patch {int(perm.order[0])}, center {center}")
    (out / f"{image_id}_orders.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


# verify --------------------------------------------------------------------


def cmd_verify(args) -> int:
    _apply_runtime(args.deterministic)
    names = SUITES if args.suite == "all" else (args.suite,)
    failed = 0
    for name in names:
        kwargs = {"seed": args.seed} if args.seed is not None else {}
        results = run_suite(name, **kwargs)
        for case in results:
            print(case.line())
        bad = [r for r in results if not r.passed]
        worst = max(results, key=lambda r: r.magnitude)
        print(f"{name}: {len(results) - len(bad)}/{len(results)} passed; worst {worst.magnitude:.3e} ({worst.name})")
        failed += len(bad)
    return EXIT_FAILURE if failed else EXIT_OK


# probe ---------------------------------------------------------------------


def _probe_row(label: str, features: np.ndarray, labels: np.ndarray, args, probe_cfg: ProbeConfig) -> dict:
    row = {"model": label}
    k = min(args.k, len(labels) - 1)
    if args.kind in ("knn", "both"):
        row["knn"] = knn_probe(features, labels, k=k, temperature=args.temperature)
    if args.kind in ("linear", "both"):
        row["linear"] = linear_probe(features, labels, probe_cfg)
    return row


def _features(model: SemAIM, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    return np.concatenate([cls_features(images[i : i + chunk], model) for i in range(0, len(images), chunk)])


def cmd_probe(args) -> int:
    run = _resolve(args)
    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    checkpoints = [load_checkpoint(p) for p in args.checkpoint or []]
    if args.dataset:
        dataset = load_manifest(args.dataset)
    else:
        spec = dataclasses.replace(run.data, seed=run.data.seed + 1)
        if checkpoints:
            spec = dataclasses.replace(spec, image_size=checkpoints[0].config.model.image_size[0])
        dataset = generate_blob_dataset(spec, out / "probe-data", split="probe")
    images, labels = dataset.load_images(), dataset.labels()
    if len(labels) < 2:
        raise ContractError("probing needs at least two images")
    probe_cfg = ProbeConfig(seed=run.seed)

    rows = []
    if args.baseline or not checkpoints:
        base_cfg = checkpoints[0].config.model if checkpoints else run.train.model
        with nx.default_dtype(np.float64):
            untrained = SemAIM.create(base_cfg, seed=run.seed)
        rows.append({**_probe_row("untrained", _features(untrained, images), labels, args, probe_cfg),
                     "order": None, "steps": 0})
    for path, ckpt in zip(args.checkpoint or [], checkpoints):
        row = _probe_row(str(path), _features(ckpt.model, images), labels, args, probe_cfg)
        rows.append({**row, "order": ckpt.config.order, "steps": ckpt.step})

    train_idx, test_idx = np.arange(0), np.arange(0)
    if args.kind in ("linear", "both"):
        train_idx, test_idx = split_indices(len(labels), probe_cfg.test_fraction, probe_cfg.seed)
    report = {
        "dataset_size": int(len(labels)),
        "num_classes": int(labels.max()) + 1,
        "chance": 1.0 / (int(labels.max()) + 1),
        "knn": {"k": min(args.k, len(labels) - 1), "temperature": args.temperature, "protocol": "leave-one-out"},
        "linear": {"train_size": int(train_idx.size), "test_size": int(test_idx.size),
                   "epochs": probe_cfg.epochs, "lr": probe_cfg.lr, "seed": probe_cfg.seed},
        "feature": "final-block [CLS] token, full attention",
        "rows": rows,
    }
    (out / "probe_report.json").write_text(json.dumps(report, indent=2) + "\n")
    (out / "probe_report.md").write_text(_report_markdown(report))
    print(_report_markdown(report), end="")
    return EXIT_OK


def _report_markdown(report: dict) -> str:
    cols = [c for c in ("knn", "linear") if any(c in r for r in report["rows"])]
    lines = [
        f"# Probe report ({report['dataset_size']} images, {report['num_classes']} classes, "
        f"chance {report['chance']:.3f})",
        "",
        f"k-NN: k={report['knn']['k']}, temperature={report['knn']['temperature']}, leave-one-out. "
        f"Linear: train={report['linear']['train_size']}, test={report['linear']['test_size']}.",
        "",
        "| model | order | steps | " + " | ".join(cols) + " |",
        "|---|---|---|" + "---|" * len(cols),
    ]
    for r in report["rows"]:
        accs = " | ".join(f"{r[c]:.3f}" for c in cols)
        lines.append(f"| {r['model']} | {r['order'] or '-'} | {r['steps']} | {accs} |")
    return "\n".join(lines) + "\n"


# entry point ---------------------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="INI file with [model]/[train]/[target]/[data] sections")
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides train.seed)")
    parser.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="single-threaded numerics; bit-identical reruns")
    parser.add_argument("--out", default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semaim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"semaim {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("pretrain", cmd_pretrain, "train a model and write checkpoints and metrics")
    p.add_argument("--order", help="raster, stochastic, similarity or semantic")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--dataset", help="manifest file; synthetic data is generated when omitted")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")

    p = add("gen-data", cmd_gen_data, "render a synthetic blob dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--split", default="train")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    p = add("visualize-order", cmd_visualize_order, "write similarity, center and rank maps for one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image", help="PPM path, or an image id together with --dataset")
    p.add_argument("--dataset")
    p.add_argument("--strategy", action="append", help="repeatable; default all four")
    p.add_argument("--oracle-teacher", action="store_true", help="use analytic teacher features instead of a model")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    p = add("verify", cmd_verify, "run an oracle verification suite")
    p.add_argument("suite", choices=(*SUITES, "all"))

    p = add("probe", cmd_probe, "k-NN and linear probes on frozen [CLS] features")
    p.add_argument("--checkpoint", action="append", help="repeatable; one report row per checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--kind", choices=("knn", "linear", "both"), default="both")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--baseline", action="store_true", help="add an untrained-model row")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out is None:
        args.out = {"gen-data": "data", "visualize-order": "visualize", "probe": "probe"}.get(args.command, "runs")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"semaim: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, ArithmeticError, OSError, KeyError) as exc:
        print(f"semaim: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
