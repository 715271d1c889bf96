"""Pretraining loop: AdamW with warmup + cosine schedule, checkpoints, metrics."""

from __future__ import annotations

import json
import math
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from semaim import numerics as nx
from semaim import ordergen as og
from semaim.data import DatasetManifest, batches
from semaim.errors import ContractError, NumericError
from semaim.model import ModelConfig, SemAIM, forward, patchify
from semaim.numerics import Tape, Tensor
from semaim.objective import TargetSpec, TeacherArchive, build_targets, mse_loss

CHECKPOINT_FORMAT = "semaim-checkpoint/1"
# Warmup share of the schedule in the reference recipe: 30 of 200 epochs.
WARMUP_FRACTION = 30 / 200


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    base_lr: float = 2e-4
    warmup_epochs: float | None = None
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    seed: int = 0
    order: str = "semantic"
    augment: bool = False
    grad_clip: float | None = None
    checkpoint_every: int = 0
    max_steps: int | None = None
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)
    target: TargetSpec = field(default_factory=TargetSpec)

    def __post_init__(self):
        og.OrderStrategy.parse(self.order)
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")
        if self.base_lr <= 0:
            raise ContractError("base_lr must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    @property
    def resolved_warmup_epochs(self) -> float:
        return self.epochs * WARMUP_FRACTION if self.warmup_epochs is None else self.warmup_epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["target"] = TargetSpec(**d["target"])
        d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor], **kwargs) -> OptimizerState:
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(m, v, **kwargs)


def no_decay_names(params: dict[str, Tensor]) -> set[str]:
    """Biases, norm scales and the [CLS] token are exempt from weight decay."""
    return {name for name, p in params.items() if p.ndim < 2}


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               no_decay=()) -> None:
    """In-place AdamW update of ``params`` and ``state``.

    Weight decay is decoupled: ``theta -= lr * wd * theta`` is applied
    separately from the bias-corrected Adam step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name} shape {p.shape}")
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        theta = p.data
        if state.weight_decay and name not in no_decay:
            theta = theta - lr * state.weight_decay * theta
        theta = theta - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[name] = Tensor(theta.astype(p.dtype), requires_grad=True)


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup from 0 to ``peak_lr``, then half-cosine decay to 0."""
    if warmup_steps >= total_steps:
        raise ContractError(f"warmup_steps {warmup_steps} must be below total_steps {total_steps}")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    progress = min((step - warmup_steps) / (total_steps - warmup_steps), 1.0)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def first_patch_entropy(perms: list[og.Permutation]) -> float:
    """Entropy in bits of which patch is predicted first across a batch."""
    firsts = np.array([p.order[0] for p in perms])
    _, counts = np.unique(firsts, return_counts=True)
    probs = counts / counts.sum()
    return float(-(probs * np.log2(probs)).sum()) + 0.0  # avoid -0.0 in logs


def save_checkpoint(path, model: SemAIM, config: TrainConfig, step: int, state: OptimizerState | None) -> Path:
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
    (path / "params").mkdir(parents=True)
    for name, t in model.params.items():
        nx.write_tensor(path / "params" / f"{name}.semt", t.data)
    optimizer = {"present": state is not None}
    if state is not None:
        (path / "optim").mkdir()
        for name in model.params:
            nx.write_tensor(path / "optim" / f"m.{name}.semt", state.m[name])
            nx.write_tensor(path / "optim" / f"v.{name}.semt", state.v[name])
        optimizer.update(t=state.t, betas=list(state.betas), eps=state.eps, weight_decay=state.weight_decay)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "step": step,
        "seed": config.seed,
        "optimizer": optimizer,
        "params": list(model.params),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


@dataclass
class Checkpoint:
    model: SemAIM
    config: TrainConfig
    step: int
    state: OptimizerState | None


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"unsupported checkpoint format {manifest.get('format')!r}")
    config = TrainConfig.from_dict(manifest["config"])
    arrays = {name: nx.read_tensor(path / "params" / f"{name}.semt") for name in manifest["params"]}
    with nx.default_dtype(config.dtype):
        model = SemAIM.create(config.model, seed=config.seed)
    model.load_state(arrays)
    state = None
    opt = manifest["optimizer"]
    if opt["present"]:
        state = OptimizerState(
            m={n: nx.read_tensor(path / "optim" / f"m.{n}.semt") for n in manifest["params"]},
            v={n: nx.read_tensor(path / "optim" / f"v.{n}.semt") for n in manifest["params"]},
            t=opt["t"],
            betas=tuple(opt["betas"]),
            eps=opt["eps"],
            weight_decay=opt["weight_decay"],
        )
    return Checkpoint(model, config, manifest["step"], state)


@dataclass
class TrainResult:
    model: SemAIM
    losses: list[float]
    checkpoint: Path
    steps: int


def train(config: TrainConfig, dataset: DatasetManifest, out_dir, resume=None, log_wall_time: bool | None = None,
          images: np.ndarray | None = None) -> TrainResult:
    """Run pretraining and write ``metrics.jsonl`` plus checkpoints under ``out_dir``.

    All randomness derives from ``config.seed``: batch order from (seed, epoch),
    order noise from (seed, step). A resumed run therefore replays exactly the
    steps an uninterrupted run would take.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if log_wall_time is None:
        log_wall_time = not nx.is_deterministic()
    strategy = og.OrderStrategy.parse(config.order)
    images = dataset.load_images() if images is None else images
    archive = TeacherArchive(config.target.teacher_source) if config.target.kind == "teacher_feature" else None

    with nx.default_dtype(config.dtype):
        if resume is not None:
            ckpt = load_checkpoint(resume)
            model, start_step, state = ckpt.model, ckpt.step, ckpt.state
            if state is None:
                raise ContractError(f"checkpoint {resume} has no optimizer state to resume from")
        else:
            model, start_step = SemAIM.create(config.model, seed=config.seed), 0
            state = OptimizerState.zeros_like(
                model.params, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay
            )
        no_decay = no_decay_names(model.params)

        steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
        total_steps = config.epochs * steps_per_epoch
        warmup_steps = int(round(config.resolved_warmup_epochs * steps_per_epoch))
        last_step = total_steps if config.max_steps is None else min(total_steps, config.max_steps)

        metrics_path = out_dir / "metrics.jsonl"
        kept = []
        if resume is not None and metrics_path.exists():
            kept = [ln for ln in metrics_path.read_text().splitlines() if json.loads(ln)["step"] < start_step]
        metrics_path.write_text("".join(ln + "\n" for ln in kept))

        losses: list[float] = []
        step = start_step
        with metrics_path.open("a") as log:
            for epoch in range(start_step // steps_per_epoch, config.epochs):
                if step >= last_step:
                    break
                stream = batches(dataset, config.batch_size, np.random.default_rng([config.seed, 1, epoch]),
                                 augment=config.augment, images=images)
                for index, batch in enumerate(stream):
                    current = epoch * steps_per_epoch + index
                    if current < step:
                        continue
                    if step >= last_step:
                        break
                    started = time.perf_counter()
                    lr = lr_at(step, total_steps, warmup_steps, config.peak_lr)
                    rng = np.random.default_rng([config.seed, 2, step])
                    with Tape() as tape:
                        tape.watch(*model.params.values())
                        result = forward(batch.images, strategy, model, rng)
                        patches = patchify(batch.images, config.model.patch_size).astype(model.dtype)
                        target = build_targets(patches, batch.ids, config.target, config.model.target_dim, archive)
                        loss = mse_loss(result.predictions, target)
                    value = loss.item()
                    if not math.isfinite(value):
                        dump = {"step": step, "epoch": epoch, "lr": lr, "ids": batch.ids, "loss": repr(value)}
                        (out_dir / "failure.json").write_text(json.dumps(dump, indent=2) + "\n")
                        raise NumericError(f"non-finite loss at step {step} (lr={lr}); see failure.json")
                    leaf_grads = tape.backward(loss)
                    grads = {name: leaf_grads[p].data for name, p in model.params.items()}
                    if config.grad_clip:
                        clip_gradients(grads, config.grad_clip)
                    adamw_step(model.params, grads, state, lr, no_decay)
                    losses.append(value)
                    record = {
                        "step": step,
                        "epoch": epoch,
                        "loss": value,
                        "lr": lr,
                        "strategy": strategy.value,
                        "perm_entropy": first_patch_entropy(result.permutations),
                        "wall_ms": round((time.perf_counter() - started) * 1000, 3) if log_wall_time else None,
                    }
                    log.write(json.dumps(record) + "\n")
                    step += 1
                    if config.checkpoint_every and step % config.checkpoint_every == 0 and step < last_step:
                        save_checkpoint(out_dir / f"step-{step:06d}", model, config, step, state)
        final = save_checkpoint(out_dir / "final", model, config, step, state)
    return TrainResult(model, losses, final, step)
