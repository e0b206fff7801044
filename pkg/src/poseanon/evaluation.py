"""Privacy audit: the privacy-unconstrained baseline and attack scenarios
I-III, with identification CCR and head-pose MAE reporting.

Scenario domains (attacker train -> attacker test):
  UNCONSTRAINED  raw train images      -> raw test images
  ATTACK_I       raw train images      -> protected test images
  ATTACK_II      protected train imgs  -> protected test images (independent draws)
  ATTACK_III     train latents         -> test latents

Both the identifier and the scenario's pose estimator train on the
scenario's train domain and are scored on its test domain against the
original ground-truth labels. Protected images are produced from encoder
means (no sampling) so audits are reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset, SplitPair, pose_scale, pose_unscale
from .errors import ConfigError, ShapeError
from .model import (IdentityClassifier, ModelBundle, PoseRegressor, _init_network,
                    images_to_tensor, one_hot_batch, tensor_to_images)
from .rng import make_generator, stream_seed

EVAL_BATCH = 256


class ScenarioId(Enum):
    UNCONSTRAINED = "unconstrained"
    ATTACK_I = "attack_i"
    ATTACK_II = "attack_ii"
    ATTACK_III = "attack_iii"


# Table row order used by the paper's results tables.
SCENARIO_ORDER = (ScenarioId.UNCONSTRAINED, ScenarioId.ATTACK_I,
                  ScenarioId.ATTACK_II, ScenarioId.ATTACK_III)

SCENARIO_LABELS = {
    ScenarioId.UNCONSTRAINED: "Privacy Unconstrained",
    ScenarioId.ATTACK_I: "Attack Scenario I",
    ScenarioId.ATTACK_II: "Attack Scenario II",
    ScenarioId.ATTACK_III: "Attack Scenario III",
}


@dataclass(frozen=True)
class AttackerConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    latent_hidden: int = 256  # width of the 2-hidden-layer perceptron on z

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigError("attacker config needs epochs >= 0, batch_size >= 1, lr >= 0")
        if self.latent_hidden < 1:
            raise ConfigError("latent_hidden must be >= 1")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "latent_hidden": self.latent_hidden}

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class MetricsReport:
    scenario: ScenarioId
    identification_ccr: float
    pose_mae_deg: tuple[float, float, float]
    pose_mae_avg_deg: float
    n_test: int
    attacker_fingerprint: str
    seed: int
    identifier_curve: list[float]
    pose_curve: list[float]

    def to_dict(self) -> dict:
        return {"scenario": self.scenario.value,
                "identification_ccr": self.identification_ccr,
                "pose_mae_deg": list(self.pose_mae_deg),
                "pose_mae_avg_deg": self.pose_mae_avg_deg,
                "n_test": self.n_test,
                "attacker_fingerprint": self.attacker_fingerprint,
                "seed": self.seed,
                "identifier_curve": self.identifier_curve,
                "pose_curve": self.pose_curve}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(ScenarioId(d["scenario"]), d["identification_ccr"],
                   tuple(d["pose_mae_deg"]), d["pose_mae_avg_deg"], d["n_test"],
                   d["attacker_fingerprint"], d["seed"],
                   d.get("identifier_curve", []), d.get("pose_curve", []))


@dataclass
class LatentDataset:
    """Encoder-mean vectors with the original labels retained."""

    z: np.ndarray  # (N, d_z) float32
    identities: np.ndarray
    poses: np.ndarray  # degrees
    n_subjects: int

    def __len__(self):
        return self.z.shape[0]


def _batched(fn, tensor: torch.Tensor) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, tensor.shape[0], EVAL_BATCH):
            outs.append(fn(tensor[start:start + EVAL_BATCH]))
    return torch.cat(outs, dim=0)


def protect_dataset(bundle: ModelBundle, dataset: Dataset, seed: int,
                    distribution=None) -> Dataset:
    """Replace every image by its identity-swapped synthesis with a target
    identity drawn per image from p(y_s); ground-truth labels are retained."""
    if dataset.n_subjects != bundle.n_subjects:
        raise ConfigError(f"dataset has {dataset.n_subjects} subjects but the model "
                          f"was built for {bundle.n_subjects}")
    from .training import sample_target_identities
    gen = make_generator(seed, "protect")
    y_s = sample_target_identities(len(dataset), bundle.n_subjects, gen, distribution)
    x = images_to_tensor(dataset.images)
    codes = one_hot_batch(y_s, bundle.n_subjects)

    protected = []
    with torch.no_grad():
        for start in range(0, len(dataset), EVAL_BATCH):
            sl = slice(start, start + EVAL_BATCH)
            z = bundle.encode_mean(x[sl])
            protected.append(bundle.decode(z, codes[sl]))
    images = tensor_to_images(torch.cat(protected, dim=0))
    meta = dict(dataset.meta, protected=True, protect_seed=seed)
    return Dataset(images, dataset.identities, dataset.poses, dataset.video_ids,
                   dataset.n_subjects, meta=meta)


def encode_dataset(bundle: ModelBundle, dataset: Dataset) -> LatentDataset:
    """Map every image to its encoder mean; labels are retained."""
    if dataset.n_subjects != bundle.n_subjects:
        raise ConfigError(f"dataset has {dataset.n_subjects} subjects but the model "
                          f"was built for {bundle.n_subjects}")
    x = images_to_tensor(dataset.images)
    z = _batched(bundle.encode_mean, x)
    return LatentDataset(z.numpy().astype(np.float32), dataset.identities.copy(),
                         dataset.poses.copy(), dataset.n_subjects)


class _LatentMlp(torch.nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.net = torch.nn.Sequential(
            torch.nn.Linear(d_in, hidden), torch.nn.LeakyReLU(0.2),
            torch.nn.Linear(hidden, hidden), torch.nn.LeakyReLU(0.2),
            torch.nn.Linear(hidden, d_out))

    def forward(self, x):
        return self.net(x)


class Attacker:
    """A trained identifier or pose estimator over images or latents."""

    def __init__(self, kind: str, domain: str, model: torch.nn.Module, curve: list[float]):
        self.kind = kind
        self.domain = domain
        self.model = model
        self.curve = curve

    def _inputs(self, data) -> torch.Tensor:
        if self.domain == "image":
            return images_to_tensor(data.images if isinstance(data, Dataset) else data)
        z = data.z if isinstance(data, LatentDataset) else data
        return torch.from_numpy(np.asarray(z, dtype=np.float32))

    def predict_identities(self, data) -> np.ndarray:
        logits = _batched(self.model, self._inputs(data))
        return (logits.argmax(dim=1) + 1).numpy()

    def predict_poses_deg(self, data) -> np.ndarray:
        preds = _batched(self.model, self._inputs(data))
        return pose_unscale(preds.numpy())


def train_attacker(kind: str, domain: str, train_data, config: AttackerConfig, seed: int,
                   model_config=None) -> Attacker:
    """Train an attacker network on labeled data.

    Image-domain attackers clone the identity-classifier / pose-regressor
    architectures; latent-domain attackers are 2-hidden-layer perceptrons.
    """
    if kind not in ("identifier", "pose_estimator"):
        raise ConfigError(f"unknown attacker kind {kind!r}")
    if domain not in ("image", "latent"):
        raise ConfigError(f"unknown attacker domain {domain!r}")

    identities = torch.from_numpy(np.asarray(train_data.identities, dtype=np.int64))
    poses = torch.from_numpy(pose_scale(train_data.poses)).to(torch.float32)
    n_subjects = train_data.n_subjects
    if kind == "identifier" and np.unique(train_data.identities).size < 2:
        raise ConfigError("identifier training data contains a single class")

    if domain == "image":
        if model_config is None:
            raise ConfigError("image-domain attackers need the model architecture config")
        net = IdentityClassifier(model_config) if kind == "identifier" else PoseRegressor(model_config)
        inputs = images_to_tensor(train_data.images)
    else:
        d_in = train_data.z.shape[1]
        d_out = n_subjects if kind == "identifier" else 3
        net = _LatentMlp(d_in, config.latent_hidden, d_out)
        inputs = torch.from_numpy(np.asarray(train_data.z, dtype=np.float32))

    gen = make_generator(seed, f"attacker:{kind}:{domain}")
    _init_network(net, gen)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate,
                           betas=(config.beta1, config.beta2))
    n = inputs.shape[0]
    batch = min(config.batch_size, n)

    curve = []
    for _ in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        losses = []
        for start in range(0, n - batch + 1, batch):
            idx = perm[start:start + batch]
            out = net(inputs[idx])
            if kind == "identifier":
                loss = F.cross_entropy(out, identities[idx] - 1)
            else:
                loss = (out - poses[idx]).abs().sum(dim=1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        curve.append(float(np.mean(losses)) if losses else float("nan"))
    return Attacker(kind, domain, net, curve)


def ccr(predicted, true) -> float:
    """Correct classification rate as a percentage."""
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.shape != true.shape:
        raise ShapeError(f"shape mismatch: {predicted.shape} vs {true.shape}")
    if predicted.size == 0:
        raise ValueError("ccr of empty prediction set")
    return 100.0 * float((predicted == true).sum()) / predicted.size


def mae(predicted_deg, true_deg) -> tuple[tuple[float, float, float], float]:
    """Per-angle mean absolute error in degrees plus the three-angle average."""
    predicted = np.asarray(predicted_deg, dtype=np.float64)
    true = np.asarray(true_deg, dtype=np.float64)
    if predicted.shape != true.shape or predicted.ndim != 2 or predicted.shape[1] != 3:
        raise ShapeError(f"pose arrays must both be (n, 3), got {predicted.shape} vs {true.shape}")
    per_angle = np.abs(predicted - true).mean(axis=0)
    triple = (float(per_angle[0]), float(per_angle[1]), float(per_angle[2]))
    return triple, (triple[0] + triple[1] + triple[2]) / 3.0


def run_scenario(scenario: ScenarioId, bundle: ModelBundle, split: SplitPair,
                 config: AttackerConfig, seed: int) -> MetricsReport:
    """Assemble the scenario's attacker train/test domains, train both
    attackers, and score them against the original labels."""
    if split.train.n_subjects != bundle.n_subjects:
        raise ConfigError(f"split has {split.train.n_subjects} subjects but the model "
                          f"was built for {bundle.n_subjects}")
    scenario = ScenarioId(scenario)

    if scenario is ScenarioId.UNCONSTRAINED:
        domain = "image"
        attacker_train, attacker_test = split.train, split.test
    elif scenario is ScenarioId.ATTACK_I:
        domain = "image"
        attacker_train = split.train
        attacker_test = protect_dataset(bundle, split.test, stream_seed(seed, "attack_i:test"))
    elif scenario is ScenarioId.ATTACK_II:
        domain = "image"
        attacker_train = protect_dataset(bundle, split.train, stream_seed(seed, "attack_ii:train"))
        attacker_test = protect_dataset(bundle, split.test, stream_seed(seed, "attack_ii:test"))
    elif scenario is ScenarioId.ATTACK_III:
        domain = "latent"
        attacker_train = encode_dataset(bundle, split.train)
        attacker_test = encode_dataset(bundle, split.test)
    else:  # pragma: no cover - exhaustive enum
        raise ConfigError(f"unknown scenario {scenario}")

    attacker_seed = stream_seed(seed, f"{scenario.value}:attacker")
    identifier = train_attacker("identifier", domain, attacker_train, config, attacker_seed,
                                model_config=bundle.config)
    pose_estimator = train_attacker("pose_estimator", domain, attacker_train, config,
                                    attacker_seed, model_config=bundle.config)

    pred_ids = identifier.predict_identities(attacker_test)
    true_ids = (attacker_test.identities if isinstance(attacker_test, (Dataset, LatentDataset))
                else attacker_test.identities)
    id_ccr = ccr(pred_ids, true_ids)

    pred_poses = pose_estimator.predict_poses_deg(attacker_test)
    triple, avg = mae(pred_poses, attacker_test.poses)

    return MetricsReport(scenario, id_ccr, triple, avg, len(attacker_test),
                         config.fingerprint(), seed, identifier.curve, pose_estimator.curve)


def render_table(reports: list[MetricsReport]) -> str:
    """Scenario rows (paper order) with CCR and MAE-average columns."""
    by_scenario = {r.scenario: r for r in reports}
    width = max(len(label) for label in SCENARIO_LABELS.values())
    lines = [f"{'Scenarios':<{width}}  Identification(%)  MAE Average(deg)"]
    for scenario in SCENARIO_ORDER:
        r = by_scenario.get(scenario)
        if r is None:
            continue
        lines.append(f"{SCENARIO_LABELS[scenario]:<{width}}  "
                     f"{r.identification_ccr:>16.2f}  {r.pose_mae_avg_deg:>15.3f}")
    return "\n".join(lines)


def save_reports(reports: list[MetricsReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_reports(path) -> list[MetricsReport]:
    with open(path) as fh:
        return [MetricsReport.from_dict(json.loads(line)) for line in fh if line.strip()]
