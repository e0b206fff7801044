"""Alternating min-max training of the generator and the three-headed
discriminator with Adam, plus deterministic checkpointing.

Every stochastic draw (reparameterization noise, target identities,
gradient-penalty mixing, batch shuffling) comes from a named substream of
one root seed, so single-threaded training is a pure function of
(config, dataset) and a checkpoint restores it bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, pose_scale
from .errors import CheckpointError, ConfigError, NonFiniteLossError, TrainingAborted
from .losses import (DiscriminatorLossBreakdown, GeneratorLossBreakdown,
                     discriminator_loss, generator_loss)
from .model import ModelBundle, ModelConfig, images_to_tensor
from .rng import RngHub

CHECKPOINT_FORMAT = "poseanon-checkpoint"
CHECKPOINT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)

_DTYPE_CODES = {"<f4": torch.float32, "<f8": torch.float64, "<i8": torch.int64, "|u1": torch.uint8}


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.0  # standard pairing with gradient-penalty critics
    beta2: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must be in [0, 1), got {(self.beta1, self.beta2)}")
        if self.eps <= 0:
            raise ConfigError(f"Adam eps must be > 0, got {self.eps}")

    def to_dict(self):
        return {"learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}


@dataclass(frozen=True)
class TrainConfig:
    lambdas_g: tuple[float, float, float, float, float] = (1.0, 1.0, 10.0, 10.0, 0.1)
    lambdas_d: tuple[float, float, float, float] = (1.0, 1.0, 10.0, 1.0)
    gp_gamma: float = 10.0
    critic_steps_per_generator_step: int = 5
    adam: AdamConfig = field(default_factory=AdamConfig)
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0  # in generator steps; 0 = final checkpoint only
    target_identity_distribution: tuple[float, ...] | None = None  # None = uniform
    classifier_on_fakes: bool = False  # variant: identity head also sees syntheses

    def __post_init__(self):
        if len(self.lambdas_g) != 5 or any(l < 0 for l in self.lambdas_g):
            raise ConfigError(f"lambdas_g must be five weights >= 0, got {self.lambdas_g}")
        if len(self.lambdas_d) != 4 or any(l < 0 for l in self.lambdas_d):
            raise ConfigError(f"lambdas_d must be four weights >= 0, got {self.lambdas_d}")
        if self.gp_gamma <= 0:
            raise ConfigError(f"gp_gamma must be > 0, got {self.gp_gamma}")
        if self.critic_steps_per_generator_step < 1:
            raise ConfigError("critic_steps_per_generator_step must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (gradient penalty pairs real/fake)")
        if self.epochs < 0 or self.log_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("epochs >= 0, log_every >= 1, checkpoint_every >= 0 required")
        if self.target_identity_distribution is not None:
            probs = self.target_identity_distribution
            if any(p < 0 for p in probs) or sum(probs) <= 0:
                raise ConfigError("target_identity_distribution must be nonnegative with positive sum")

    def to_dict(self) -> dict:
        return {
            "lambdas_g": list(self.lambdas_g),
            "lambdas_d": list(self.lambdas_d),
            "gp_gamma": self.gp_gamma,
            "critic_steps_per_generator_step": self.critic_steps_per_generator_step,
            "adam": self.adam.to_dict(),
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "log_every": self.log_every,
            "checkpoint_every": self.checkpoint_every,
            "target_identity_distribution": (
                None if self.target_identity_distribution is None
                else list(self.target_identity_distribution)),
            "classifier_on_fakes": self.classifier_on_fakes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        adam = d.pop("adam", {})
        dist = d.pop("target_identity_distribution", None)
        return cls(
            lambdas_g=tuple(d.get("lambdas_g", (1.0, 1.0, 10.0, 10.0, 0.1))),
            lambdas_d=tuple(d.get("lambdas_d", (1.0, 1.0, 10.0, 1.0))),
            gp_gamma=d.get("gp_gamma", 10.0),
            critic_steps_per_generator_step=d.get("critic_steps_per_generator_step", 5),
            adam=AdamConfig(**adam) if isinstance(adam, dict) else adam,
            batch_size=d.get("batch_size", 32),
            epochs=d.get("epochs", 10),
            seed=d.get("seed", 0),
            log_every=d.get("log_every", 50),
            checkpoint_every=d.get("checkpoint_every", 0),
            target_identity_distribution=None if dist is None else tuple(dist),
            classifier_on_fakes=d.get("classifier_on_fakes", False),
        )

    def fingerprint(self) -> str:
        return _fingerprint(self.to_dict())


def _fingerprint(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def config_diff(stored: dict, current: dict, prefix: str = "") -> list[str]:
    """Field-level differences between two config dicts."""
    out = []
    for key in sorted(set(stored) | set(current)):
        a, b = stored.get(key, "<absent>"), current.get(key, "<absent>")
        path = f"{prefix}{key}"
        if isinstance(a, dict) and isinstance(b, dict):
            out += config_diff(a, b, prefix=path + ".")
        elif a != b:
            out.append(f"{path}: checkpoint={a!r} current={b!r}")
    return out


class BatchCursor:
    """Deterministic shuffled batch indices; reshuffles from its stream when
    fewer than a full batch remains (epochs drop the remainder)."""

    def __init__(self, n: int, batch_size: int, gen: torch.Generator):
        if batch_size > n:
            raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
        self.n = n
        self.batch_size = batch_size
        self.gen = gen
        self.perm: torch.Tensor | None = None
        self.pos = 0

    def next_indices(self) -> torch.Tensor:
        if self.perm is None or self.pos + self.batch_size > self.n:
            self.perm = torch.randperm(self.n, generator=self.gen)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


def sample_target_identities(batch_size: int, n_subjects: int, gen: torch.Generator,
                             distribution=None) -> torch.Tensor:
    """i.i.d. 1-based target identities from p(y_s), uniform by default."""
    if n_subjects < 1:
        raise ConfigError(f"n_subjects must be >= 1, got {n_subjects}")
    if distribution is None:
        return torch.randint(1, n_subjects + 1, (batch_size,), generator=gen)
    probs = torch.as_tensor(distribution, dtype=torch.float64)
    if probs.shape != (n_subjects,):
        raise ConfigError(f"target identity distribution must have length {n_subjects}")
    if (probs < 0).any() or probs.sum() <= 0:
        raise ConfigError("target identity distribution must be nonnegative with positive sum")
    return torch.multinomial(probs, batch_size, replacement=True, generator=gen) + 1


class TrainState:
    """Everything the alternating loop mutates: parameters, both optimizers,
    step counters, and the random streams."""

    def __init__(self, bundle: ModelBundle, model_config: ModelConfig, config: TrainConfig,
                 rng: RngHub | None = None):
        self.bundle = bundle
        self.model_config = model_config
        self.config = config
        self.rng = rng or RngHub(config.seed)
        adam = config.adam
        self.opt_g = torch.optim.Adam(bundle.generator_parameters(), lr=adam.learning_rate,
                                      betas=(adam.beta1, adam.beta2), eps=adam.eps)
        self.opt_d = torch.optim.Adam(bundle.discriminator_parameters(), lr=adam.learning_rate,
                                      betas=(adam.beta1, adam.beta2), eps=adam.eps)
        self.g_step = 0
        self.d_step = 0
        self.cursor_g: BatchCursor | None = None
        self.cursor_d: BatchCursor | None = None

    @classmethod
    def new(cls, model_config: ModelConfig, config: TrainConfig) -> "TrainState":
        bundle = ModelBundle.build(model_config, seed=config.seed)
        return cls(bundle, model_config, config)

    def _noise(self, batch_size: int) -> torch.Tensor:
        return torch.randn((batch_size, self.bundle.d_z), generator=self.rng.get("noise"))

    def _targets(self, batch_size: int) -> torch.Tensor:
        return sample_target_identities(batch_size, self.bundle.n_subjects,
                                        self.rng.get("targets"),
                                        self.config.target_identity_distribution)


def discriminator_step(state: TrainState, x: torch.Tensor, y_id: torch.Tensor,
                       y_pose: torch.Tensor) -> DiscriminatorLossBreakdown:
    """One Adam ascent step (descent on -L_D) on the discriminator partition;
    generator parameters are untouched."""
    bd = discriminator_loss(state.bundle, x, y_id, y_pose, state._targets(x.shape[0]),
                            state._noise(x.shape[0]), state.config.lambdas_d,
                            state.config.gp_gamma, state.rng.get("gp"),
                            classify_fakes=state.config.classifier_on_fakes)
    if not torch.isfinite(bd.total):
        raise NonFiniteLossError(f"non-finite discriminator loss: {bd.as_floats()}",
                                 breakdown=bd.as_floats())
    state.opt_d.zero_grad()
    (-bd.total).backward()
    state.opt_d.step()
    state.d_step += 1
    return bd


def generator_step(state: TrainState, x: torch.Tensor, y_id: torch.Tensor,
                   y_pose: torch.Tensor) -> GeneratorLossBreakdown:
    """One Adam descent step on encoder + decoder; discriminator untouched."""
    bd = generator_loss(state.bundle, x, y_id, y_pose, state._targets(x.shape[0]),
                        state._noise(x.shape[0]), state.config.lambdas_g)
    if not torch.isfinite(bd.total):
        raise NonFiniteLossError(f"non-finite generator loss: {bd.as_floats()}",
                                 breakdown=bd.as_floats())
    state.opt_g.zero_grad()
    bd.total.backward()
    state.opt_g.step()
    state.g_step += 1
    return bd


def train(config: TrainConfig, dataset: Dataset, model_config: ModelConfig, *,
          checkpoint_dir=None, resume_from=None) -> tuple[TrainState, list[dict]]:
    """Run the alternating schedule: critic_steps_per_generator_step
    discriminator steps, then one generator step, for `epochs` passes of
    generator steps over the shuffled training set."""
    if model_config.n_subjects != dataset.n_subjects:
        raise ConfigError(f"model expects {model_config.n_subjects} subjects, "
                          f"dataset has {dataset.n_subjects}")
    if tuple(model_config.image_size) != tuple(dataset.image_size):
        raise ConfigError(f"model image size {model_config.image_size} != "
                          f"dataset {dataset.image_size}")

    if resume_from is not None:
        state = load_checkpoint(resume_from, expect_model_config=model_config,
                                expect_train_config=config)
    else:
        state = TrainState.new(model_config, config)

    x_all = images_to_tensor(dataset.images)
    y_id_all = torch.from_numpy(dataset.identities)
    y_pose_all = torch.from_numpy(pose_scale(dataset.poses)).to(torch.float32)

    n = len(dataset)
    steps_per_epoch = n // config.batch_size
    if config.epochs > 0 and steps_per_epoch == 0:
        raise ConfigError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    total_g_steps = config.epochs * steps_per_epoch

    if state.cursor_g is None:
        state.cursor_g = BatchCursor(n, config.batch_size, state.rng.get("shuffle_g"))
        state.cursor_d = BatchCursor(n, config.batch_size, state.rng.get("shuffle_d"))

    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    records: list[dict] = []
    failures = 0
    last_breakdowns: list[dict] = []
    t0 = time.monotonic()

    def batch(cursor):
        idx = cursor.next_indices()
        return x_all[idx], y_id_all[idx], y_pose_all[idx]

    def run_step(step_fn, cursor):
        nonlocal failures
        while True:
            try:
                bd = step_fn(state, *batch(cursor))
            except NonFiniteLossError as exc:
                failures += 1
                last_breakdowns.append(exc.breakdown or {})
                records.append({"event": "non_finite_skip", "g_step": state.g_step,
                                "d_step": state.d_step, "breakdown": exc.breakdown})
                if failures >= 2:
                    raise TrainingAborted(
                        f"two consecutive non-finite losses at g_step {state.g_step}",
                        breakdowns=last_breakdowns[-2:]) from exc
                continue  # skip this batch, retry once with the next one
            failures = 0
            return bd

    while state.g_step < total_g_steps:
        d_bd = None
        for _ in range(config.critic_steps_per_generator_step):
            d_bd = run_step(discriminator_step, state.cursor_d)
        g_bd = run_step(generator_step, state.cursor_g)

        if state.g_step % config.log_every == 0 or state.g_step == total_g_steps:
            records.append({
                "event": "loss", "g_step": state.g_step, "d_step": state.d_step,
                "wall_time": time.monotonic() - t0,
                "generator": g_bd.as_floats(),
                "discriminator": d_bd.as_floats() if d_bd is not None else None,
            })
        if checkpoint_dir is not None and config.checkpoint_every > 0 \
                and state.g_step % config.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_dir / f"ckpt_{state.g_step:07d}.zip")

    if checkpoint_dir is not None:
        save_checkpoint(state, checkpoint_dir / "ckpt_final.zip")
    return state, records


def write_log(records: list[dict], path, include_wall_time: bool = True) -> None:
    """Append training records as JSON lines. With include_wall_time=False the
    log is byte-reproducible across identical runs (determinism mode)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for rec in records:
            if not include_wall_time:
                rec = {k: v for k, v in rec.items() if k != "wall_time"}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints: little-endian blobs keyed by network/layer path + JSON header
# ---------------------------------------------------------------------------

def _tensor_blob(t: torch.Tensor) -> tuple[np.ndarray, str]:
    arr = t.detach().cpu().numpy()
    code = {np.float32: "<f4", np.float64: "<f8", np.int64: "<i8", np.uint8: "|u1"}[arr.dtype.type]
    return np.ascontiguousarray(arr), code


def _collect_blobs(state: TrainState) -> dict[str, torch.Tensor]:
    blobs: dict[str, torch.Tensor] = {}
    for key, p in state.bundle.named_parameter_blobs().items():
        blobs[f"params/{key}"] = p
    for tag, opt, params in (("g", state.opt_g, _named_params(state.bundle, "generator")),
                             ("d", state.opt_d, _named_params(state.bundle, "discriminator"))):
        for path, p in params:
            st = opt.state.get(p)
            if not st:
                continue
            blobs[f"opt_{tag}/{path}/step"] = st["step"]
            blobs[f"opt_{tag}/{path}/exp_avg"] = st["exp_avg"]
            blobs[f"opt_{tag}/{path}/exp_avg_sq"] = st["exp_avg_sq"]
    for name, tensor in state.rng.state_dict().items():
        blobs[f"rng/{name}"] = tensor
    for tag, cursor in (("g", state.cursor_g), ("d", state.cursor_d)):
        if cursor is not None and cursor.perm is not None:
            blobs[f"cursor/{tag}/perm"] = cursor.perm
    return blobs


def _named_params(bundle: ModelBundle, partition: str) -> list[tuple[str, torch.nn.Parameter]]:
    names = {"generator": ("encoder", "decoder"),
             "discriminator": ("critic", "classifier", "regressor", "shared")}[partition]
    out = []
    for net_name, module in bundle.named_networks():
        if net_name in names:
            for pname, p in module.named_parameters():
                out.append((f"{net_name}/{pname}", p))
    return out


def save_checkpoint(state: TrainState, path) -> None:
    """Write the full training state; load_checkpoint restores it bit-exactly."""
    blobs = _collect_blobs(state)
    manifest = {}
    payload: list[tuple[str, bytes]] = []
    for key in sorted(blobs):
        arr, code = _tensor_blob(blobs[key])
        manifest[key] = {"dtype": code, "shape": list(arr.shape)}
        payload.append((f"blobs/{key}.bin", arr.tobytes()))
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "g_step": state.g_step,
        "d_step": state.d_step,
        "model_config": state.model_config.to_dict(),
        "train_config": state.config.to_dict(),
        "fingerprints": {"model": _fingerprint(state.model_config.to_dict()),
                         "train": state.config.fingerprint()},
        "cursors": {tag: {"pos": cur.pos if cur is not None else 0,
                          "active": bool(cur is not None and cur.perm is not None)}
                    for tag, cur in (("g", state.cursor_g), ("d", state.cursor_d))},
        "blobs": manifest,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("header.json", date_time=_ZIP_DATE),
                    json.dumps(header, sort_keys=True, indent=1))
        for name, data in payload:
            zf.writestr(zipfile.ZipInfo(name, date_time=_ZIP_DATE), data)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path, expect_model_config: ModelConfig | None = None,
                    expect_train_config: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState from a checkpoint; refuses files whose stored
    config differs from the expected one, with a field-level diff."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
            if header.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
            raw = {}
            for key, spec in header["blobs"].items():
                data = zf.read(f"blobs/{key}.bin")
                dtype = np.dtype(spec["dtype"])
                expected = int(np.prod(spec["shape"])) * dtype.itemsize if spec["shape"] else dtype.itemsize
                if len(data) != expected:
                    raise CheckpointError(f"blob {key} has {len(data)} bytes, expected {expected}")
                arr = np.frombuffer(data, dtype=dtype).reshape(spec["shape"]).copy()
                raw[key] = torch.from_numpy(arr)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc

    for expected, stored_key in ((expect_model_config, "model_config"),
                                 (expect_train_config, "train_config")):
        if expected is not None:
            diff = config_diff(header[stored_key], expected.to_dict())
            if diff:
                raise CheckpointError(
                    f"checkpoint {stored_key} differs from current config:\n  " + "\n  ".join(diff))

    model_config = ModelConfig.from_dict(header["model_config"])
    train_config = TrainConfig.from_dict(header["train_config"])
    bundle = ModelBundle.build(model_config, seed=train_config.seed)
    state = TrainState(bundle, model_config, train_config)
    state.g_step = header["g_step"]
    state.d_step = header["d_step"]

    with torch.no_grad():
        for key, p in bundle.named_parameter_blobs().items():
            blob = raw.get(f"params/{key}")
            if blob is None:
                raise CheckpointError(f"checkpoint missing parameter blob {key}")
            if tuple(blob.shape) != tuple(p.shape):
                raise CheckpointError(f"parameter {key} shape {tuple(blob.shape)} != {tuple(p.shape)}")
            p.copy_(blob)

    for tag, opt, params in (("g", state.opt_g, _named_params(bundle, "generator")),
                             ("d", state.opt_d, _named_params(bundle, "discriminator"))):
        for ppath, p in params:
            step_key = f"opt_{tag}/{ppath}/step"
            if step_key in raw:
                opt.state[p] = {"step": raw[step_key].clone(),
                                "exp_avg": raw[f"opt_{tag}/{ppath}/exp_avg"].clone(),
                                "exp_avg_sq": raw[f"opt_{tag}/{ppath}/exp_avg_sq"].clone()}

    rng_states = {key.split("/", 1)[1]: blob for key, blob in raw.items() if key.startswith("rng/")}
    state.rng.load_state_dict(rng_states)

    n_hint = None
    for tag in ("g", "d"):
        info = header["cursors"][tag]
        perm = raw.get(f"cursor/{tag}/perm")
        if info["active"] and perm is not None:
            cursor = BatchCursor(perm.numel(), train_config.batch_size, state.rng.get(f"shuffle_{tag}"))
            cursor.perm = perm
            cursor.pos = info["pos"]
            setattr(state, f"cursor_{tag}", cursor)
            n_hint = perm.numel()
    if n_hint is not None:
        for tag in ("g", "d"):
            if getattr(state, f"cursor_{tag}") is None:
                setattr(state, f"cursor_{tag}",
                        BatchCursor(n_hint, train_config.batch_size, state.rng.get(f"shuffle_{tag}")))
    return state
