"""Training harness: synthetic data, AdamW, EMA, the step loop, and resume.

All randomness in a run flows through one generator seeded from the config,
and its state rides along in checkpoints, so a resumed run reproduces an
uninterrupted one bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .config import ConfigFile, config_to_dict
from .flow import TimeSampler, rf_loss
from .model import DiTMoE
from .moe import update_bias
from .tensor import backward, find_first_nonfinite, global_norm

__all__ = [
    "TrainConfig",
    "TrainingError",
    "AdamW",
    "EMA",
    "SyntheticDataset",
    "train_step",
    "run_training",
    "make_bundle",
    "apply_ema",
    "metrics_header",
]


class TrainingError(RuntimeError):
    """A training step could not proceed."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 100
    batch_size: int = 32
    lr: float = 1e-4              # constant; no schedule
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 0.0        # global-norm threshold; 0 disables
    ema_decay: float = 0.9999
    label_drop: float = 0.1
    bias_update_rate: float = 0.01
    seed: int = 0
    hflip: bool = True
    noise_scale: float = 1.0
    time_mode: str = "uniform"
    time_mu: float = -0.8
    time_sigma: float = 0.8
    metrics_flush: int = 1        # rows between explicit flushes
    checkpoint_every: int = 0     # 0: checkpoint only at the end

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not 0.0 <= self.label_drop <= 1.0:
            raise ValueError("label_drop must lie in [0, 1]")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be non-negative")
        if self.metrics_flush < 1:
            raise ValueError("metrics_flush must be at least 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")

    def time_sampler(self) -> TimeSampler:
        return TimeSampler(mode=self.time_mode, mu=self.time_mu,
                           sigma=self.time_sigma)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class AdamW:
    """Decoupled weight decay with bias-corrected moments.

    A parameter with no gradient this step contributes zeros to its
    moment updates (rather than being skipped), so a resumed run applies
    the same arithmetic as an uninterrupted one."""

    def __init__(self, params: dict, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.95, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    @classmethod
    def from_config(cls, params: dict, tc: TrainConfig) -> "AdamW":
        return cls(params, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2,
                   eps=tc.eps, weight_decay=tc.weight_decay)

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def state(self):
        return self.step_count, dict(self.m), dict(self.v)

    def load(self, step_count: int, m: dict, v: dict):
        for label, table in (("first-moment", m), ("second-moment", v)):
            for key in sorted(set(self.params) | set(table)):
                if key not in table:
                    raise KeyError(f"optimizer {label} table missing {key!r}")
                if key not in self.params:
                    raise KeyError(f"optimizer {label} table has unknown {key!r}")
        self.step_count = int(step_count)
        self.m = {k: np.array(m[k], dtype=np.float64) for k in self.params}
        self.v = {k: np.array(v[k], dtype=np.float64) for k in self.params}


class EMA:
    """Shadow copy of the trainable parameters; never read by the
    training graph itself."""

    def __init__(self, params: dict, decay: float):
        if not 0.0 <= decay < 1.0:
            raise ValueError("ema decay must lie in [0, 1)")
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self, params: dict):
        d = self.decay
        for name, p in params.items():
            s = self.shadow[name]
            s *= d
            s += (1.0 - d) * p.data

    def state(self) -> dict:
        return dict(self.shadow)

    def load(self, table: dict):
        for key in sorted(set(self.shadow) | set(table)):
            if key not in table:
                raise KeyError(f"EMA table missing {key!r}")
            if key not in self.shadow:
                raise KeyError(f"EMA table has unknown {key!r}")
        self.shadow = {k: np.array(table[k], dtype=np.float64)
                       for k in self.shadow}


@dataclass(frozen=True)
class SyntheticDataset:
    """Class-conditional striped patterns with seeded noise, in [-1, 1].

    Each class owns an orientation and stripe frequency; the per-image
    generator is seeded by (seed, class, index) so any image can be
    regenerated without replaying iteration order."""

    num_classes: int
    height: int
    width: int
    channels: int = 3
    seed: int = 0

    def image(self, label: int, index: int) -> np.ndarray:
        if not 0 <= label < self.num_classes:
            raise ValueError(f"label {label} outside [0, {self.num_classes})")
        rng = np.random.default_rng([self.seed, label, index])
        yy, xx = np.meshgrid(np.linspace(-1.0, 1.0, self.height),
                             np.linspace(-1.0, 1.0, self.width), indexing="ij")
        angle = np.pi * label / max(self.num_classes, 1)
        freq = 2.0 + 2.0 * (label % 3)
        u = np.cos(angle) * xx + np.sin(angle) * yy
        phase = rng.uniform(0.0, 2.0 * np.pi)
        bands = [np.sin(freq * np.pi * u + phase + k * np.pi / 2)
                 for k in range(self.channels)]
        img = 0.8 * np.stack(bands) + 0.2 * rng.standard_normal(
            (self.channels, self.height, self.width))
        return np.clip(img, -1.0, 1.0)

    def batch(self, rng: np.random.Generator, n: int):
        labels = rng.integers(0, self.num_classes, n)
        indices = rng.integers(0, 1_000_000, n)
        x = np.stack([self.image(int(c), int(i))
                      for c, i in zip(labels, indices)])
        return x, labels


def _describe(t) -> str:
    if t is None:
        return "loss itself (no earlier non-finite value in the graph)"
    label = t.name if t.name else f"intermediate #{t._id}"
    return f"{label} with shape {tuple(t.data.shape)}"


def train_step(model: DiTMoE, optimizer: AdamW, ema: EMA, batch,
               config: TrainConfig, rng: np.random.Generator,
               step: int) -> dict:
    """One forward/backward/update; returns the metrics record."""
    x0, labels = batch
    x0 = np.asarray(x0, dtype=np.float64)
    if config.hflip:
        flips = rng.random(x0.shape[0]) < 0.5
        x0 = np.where(flips[:, None, None, None], x0[..., ::-1], x0)

    loss = rf_loss(model, x0, labels, config.time_sampler(), rng,
                   label_drop=config.label_drop,
                   noise_scale=config.noise_scale, step=step)
    if not np.isfinite(loss.data):
        # Inspect while the graph is still alive; backward would free it.
        bad = find_first_nonfinite(loss)
        raise TrainingError(
            f"non-finite loss at step {step}; first non-finite tensor: "
            f"{_describe(bad)}")

    model.zero_grads()
    backward(loss)
    params = model.parameters()
    grad_norm = global_norm(p.grad for p in params.values())
    if config.grad_clip > 0 and grad_norm > config.grad_clip:
        scale = config.grad_clip / grad_norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale

    optimizer.step()
    ema.update(params)

    load_std = []
    active = 0
    total = 0
    routers = model.routers()
    for i in sorted(routers):
        load = routers[i].load
        load_std.append(float(load.std()))
        active += int(np.count_nonzero(load))
        total += load.size
        update_bias(routers[i])
    fraction = active / total if total else 1.0

    return {"step": step, "loss": float(loss.data),
            "grad_norm": float(grad_norm), "load_std": load_std,
            "experts_active_fraction": fraction}


def metrics_header(n_moe_layers: int) -> list:
    cols = ["step", "loss", "grad_norm"]
    cols += [f"load_std_layer_{i}" for i in range(n_moe_layers)]
    cols.append("experts_active_fraction")
    return cols


def _format_row(record: dict) -> str:
    cells = [str(record["step"]), f"{record['loss']:.17g}",
             f"{record['grad_norm']:.17g}"]
    cells += [f"{s:.17g}" for s in record["load_std"]]
    cells.append(f"{record['experts_active_fraction']:.17g}")
    return ",".join(cells)


def make_bundle(cf: ConfigFile, model: DiTMoE, optimizer: AdamW, ema: EMA,
                rng: np.random.Generator, step: int) -> CheckpointBundle:
    opt_step, m, v = optimizer.state()
    return CheckpointBundle(config=config_to_dict(cf), step=step,
                            weights=model.state_arrays(), opt_step=opt_step,
                            opt_m=m, opt_v=v, ema=ema.state(),
                            rng_state=rng.bit_generator.state)


def apply_ema(model: DiTMoE, ema_table: dict):
    """Overwrite the model's trainable parameters with their EMA shadows
    (router biases keep their live values)."""
    for name, param in model.parameters().items():
        if name not in ema_table:
            raise KeyError(f"EMA table missing {name!r}")
        param.data = np.array(ema_table[name], dtype=np.float64)


def run_training(cf: ConfigFile, out_dir, resume=None,
                 steps_override=None) -> dict:
    """Train per the config-file train section; write metrics.csv and
    checkpoint.bin under out_dir; return the run summary with live objects."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = TrainConfig.from_dict(cf.train)
    if steps_override is not None:
        tc = replace(tc, steps=steps_override)

    model = DiTMoE(cf.model, seed=tc.seed,
                   bias_update_rate=tc.bias_update_rate)
    optimizer = AdamW.from_config(model.parameters(), tc)
    ema = EMA(model.parameters(), tc.ema_decay)
    rng = np.random.default_rng([tc.seed, 1])

    start = 0
    if resume is not None:
        bundle = load_checkpoint(resume)
        model.load_state(bundle.weights)
        optimizer.load(bundle.opt_step, bundle.opt_m, bundle.opt_v)
        ema.load(bundle.ema)
        rng.bit_generator.state = bundle.rng_state
        start = bundle.step
    if start > tc.steps:
        raise TrainingError(
            f"checkpoint is at step {start}, beyond the configured "
            f"{tc.steps} steps")

    dataset = SyntheticDataset(num_classes=cf.model.num_classes,
                               height=cf.model.image_h,
                               width=cf.model.image_w,
                               channels=cf.model.in_channels, seed=tc.seed)

    metrics_path = out_dir / "metrics.csv"
    appending = resume is not None and metrics_path.exists()
    losses = []
    with open(metrics_path, "a" if appending else "w") as fh:
        if not appending:
            fh.write(",".join(metrics_header(len(model.routers()))) + "\n")
        for step in range(start, tc.steps):
            batch = dataset.batch(rng, tc.batch_size)
            record = train_step(model, optimizer, ema, batch, tc, rng, step)
            losses.append(record["loss"])
            fh.write(_format_row(record) + "\n")
            if (step + 1) % tc.metrics_flush == 0:
                fh.flush()
            done = step + 1
            if (tc.checkpoint_every and done % tc.checkpoint_every == 0
                    and done < tc.steps):
                save_checkpoint(make_bundle(cf, model, optimizer, ema, rng, done),
                                out_dir / f"checkpoint_step{done}.bin")

    checkpoint_path = out_dir / "checkpoint.bin"
    save_checkpoint(make_bundle(cf, model, optimizer, ema, rng, tc.steps),
                    checkpoint_path)
    return {"losses": losses, "checkpoint": checkpoint_path,
            "metrics": metrics_path, "model": model, "optimizer": optimizer,
            "ema": ema, "rng": rng, "train_config": tc}
