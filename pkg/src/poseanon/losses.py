"""Generator and discriminator objectives.

The generator minimizes a five-term cost: a Wasserstein adversarial term on
the identity-swapped synthesis, an identity NLL pushing the swapped image
toward the sampled target identity, an L1 pose term, a squared-L2
reconstruction term on the own-identity synthesis, and a KL pull of the
latent posterior toward N(0, I). The discriminator maximizes the critic gap
plus identity log-likelihood on real images, minus the pose L1 on real
images, minus a gradient penalty keeping the critic 1-Lipschitz.

Inside the generator cost the discriminator networks act purely as
evaluation devices: their parameters receive zero gradient. Symmetrically,
the discriminator cost sees synthesized images as constants.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import torch

from .errors import ShapeError
from .model import one_hot_batch, reparameterize

PROB_FLOOR = 1e-8      # floor inside logs
GRAD_NORM_EPS = 1e-12  # under the square root of the penalty's gradient norm


@dataclass
class GeneratorLossBreakdown:
    adversarial: torch.Tensor
    identity_nll: torch.Tensor
    pose_l1: torch.Tensor
    recon_l2: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor
    weights: tuple[float, float, float, float, float]

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in
                ("adversarial", "identity_nll", "pose_l1", "recon_l2", "kl", "total")}


@dataclass
class DiscriminatorLossBreakdown:
    wasserstein_gap: torch.Tensor
    identity_loglik: torch.Tensor
    pose_l1_real: torch.Tensor
    gradient_penalty: torch.Tensor
    total: torch.Tensor
    weights: tuple[float, float, float, float]
    gp_gamma: float

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in
                ("wasserstein_gap", "identity_loglik", "pose_l1_real", "gradient_penalty", "total")}


def kl_gaussian(mean: torch.Tensor, log_variance: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, diag exp(log_variance)) || N(0, I)), averaged over the batch."""
    if mean.shape != log_variance.shape:
        raise ShapeError(f"shape mismatch: {tuple(mean.shape)} vs {tuple(log_variance.shape)}")
    if not (torch.isfinite(mean).all() and torch.isfinite(log_variance).all()):
        raise ValueError("non-finite input to kl_gaussian")
    per_sample = 0.5 * (mean.pow(2) + log_variance.exp() - 1.0 - log_variance).sum(dim=-1)
    return per_sample.mean()


def pose_l1(true_pose: torch.Tensor, predicted_pose: torch.Tensor) -> torch.Tensor:
    """Batch mean of sum_i |y_i - yhat_i| over the three angles. No angle
    wrapping: poses live in [-90, 90] degrees."""
    if true_pose.shape != predicted_pose.shape or true_pose.shape[-1] != 3:
        raise ShapeError(f"pose batches must both be (k, 3), got {tuple(true_pose.shape)} "
                         f"vs {tuple(predicted_pose.shape)}")
    return (true_pose - predicted_pose).abs().sum(dim=-1).mean()


def recon_l2(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Batch mean of the squared L2 distance over all pixels."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).pow(2).flatten(1).sum(dim=1).mean()


def identity_nll(probabilities: torch.Tensor, targets: torch.Tensor,
                 floor: float = PROB_FLOOR) -> torch.Tensor:
    """Batch mean of -log p[target] with a probability floor; targets are 1-based."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if probabilities.dim() != 2 or targets.dim() != 1 or probabilities.shape[0] != targets.shape[0]:
        raise ShapeError(f"expected (k, n) probabilities and (k,) targets, got "
                         f"{tuple(probabilities.shape)} and {tuple(targets.shape)}")
    if targets.numel() and (targets.min() < 1 or targets.max() > probabilities.shape[1]):
        raise IndexError(f"target identity outside 1..{probabilities.shape[1]}")
    picked = probabilities.gather(1, (targets - 1).unsqueeze(1)).squeeze(1)
    return -(picked.clamp_min(floor).log()).mean()


def gradient_penalty(critic_fn, real: torch.Tensor, fake: torch.Tensor, gamma: float,
                     gen: torch.Generator) -> torch.Tensor:
    """gamma * E[(||grad critic(x_h)||_2 - 1)^2] at x_h = c*real + (1-c)*fake,
    one mixing coefficient c ~ U[0,1] per sample."""
    if real.shape != fake.shape:
        raise ShapeError(f"real/fake shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    mix_shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    c = torch.rand(mix_shape, generator=gen, dtype=real.dtype)
    x_h = (c * real.detach() + (1.0 - c) * fake.detach()).requires_grad_(True)
    scores = critic_fn(x_h)
    grads = torch.autograd.grad(scores.sum(), x_h, create_graph=True)[0]
    norms = (grads.flatten(1).pow(2).sum(dim=1) + GRAD_NORM_EPS).sqrt()
    return gamma * (norms - 1.0).pow(2).mean()


@contextmanager
def _frozen(params):
    saved = [(p, p.requires_grad) for p in params]
    try:
        for p, _ in saved:
            p.requires_grad_(False)
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def _disc_params(bundle):
    getter = getattr(bundle, "discriminator_parameters", None)
    return getter() if getter is not None else []


def generator_loss(bundle, x: torch.Tensor, y_id: torch.Tensor, y_pose: torch.Tensor,
                   y_s: torch.Tensor, noise: torch.Tensor,
                   weights: tuple[float, ...]) -> GeneratorLossBreakdown:
    """Full generator cost on one batch.

    `y_pose` is in normalized units (degrees / 90). `y_id` and `y_s` are
    1-based identity labels. `noise` is the standard-normal draw for the
    reparameterized latent sample.
    """
    if len(weights) != 5:
        raise ValueError(f"generator loss takes five weights, got {len(weights)}")
    if any(w < 0 for w in weights):
        raise ValueError(f"generator loss weights must be >= 0, got {weights}")
    l1, l2, l3, l4, l5 = (float(w) for w in weights)
    n = bundle.n_subjects

    with _frozen(_disc_params(bundle)):
        mean, log_variance = bundle.encode(x)
        z = reparameterize(mean, log_variance, noise)
        code_s = one_hot_batch(y_s, n, dtype=z.dtype)
        code_id = one_hot_batch(y_id, n, dtype=z.dtype)
        # One decoder call covers both syntheses (per-sample independence).
        both = bundle.decode(torch.cat([z, z], dim=0), torch.cat([code_s, code_id], dim=0))
        swapped, reconstructed = both[:x.shape[0]], both[x.shape[0]:]

        try:
            adversarial = -bundle.critic_score(swapped).mean()
        except Exception as exc:
            raise type(exc)(f"adversarial term: {exc}") from exc
        try:
            id_term = identity_nll(bundle.identity_probs(swapped), y_s)
        except Exception as exc:
            raise type(exc)(f"identity term: {exc}") from exc
        try:
            pose_term = pose_l1(y_pose, bundle.pose_estimate(swapped))
        except Exception as exc:
            raise type(exc)(f"pose term: {exc}") from exc
        recon_term = recon_l2(x, reconstructed)
        kl_term = kl_gaussian(mean, log_variance)

        total = (l1 * adversarial + l2 * id_term + l3 * pose_term
                 + l4 * recon_term + l5 * kl_term)

    return GeneratorLossBreakdown(adversarial, id_term, pose_term, recon_term, kl_term,
                                  total, (l1, l2, l3, l4, l5))


def discriminator_loss(bundle, x: torch.Tensor, y_id: torch.Tensor, y_pose: torch.Tensor,
                       y_s: torch.Tensor, noise: torch.Tensor, weights: tuple[float, ...],
                       gamma: float, gen: torch.Generator,
                       classify_fakes: bool = False) -> DiscriminatorLossBreakdown:
    """Full discriminator cost on one batch; synthesized images are built
    with the generator frozen (no generator gradient).

    With classify_fakes the identity head is additionally trained to recover
    the *original* identity from identity-swapped syntheses, which sharpens
    the adversarial pressure on the encoder to drop identity information.
    Off by default: the written cost trains the identity head on real
    samples only.
    """
    if len(weights) != 4:
        raise ValueError(f"discriminator loss takes four weights, got {len(weights)}")
    if any(w < 0 for w in weights):
        raise ValueError(f"discriminator loss weights must be >= 0, got {weights}")
    l1, l2, l3, l4 = (float(w) for w in weights)
    n = bundle.n_subjects

    with torch.no_grad():
        mean, log_variance = bundle.encode(x)
        z = reparameterize(mean, log_variance, noise)
        fake = bundle.decode(z, one_hot_batch(y_s, n, dtype=z.dtype))

    scores = bundle.critic_score(torch.cat([x, fake], dim=0))
    gap = scores[:x.shape[0]].mean() - scores[x.shape[0]:].mean()
    # Pose supervision uses real samples only; identity likewise unless the
    # classify_fakes variant is enabled.
    if classify_fakes:
        probs = bundle.identity_probs(torch.cat([x, fake], dim=0))
        id_loglik = -identity_nll(probs, torch.cat([y_id, y_id], dim=0))
    else:
        id_loglik = -identity_nll(bundle.identity_probs(x), y_id)
    pose_term = pose_l1(y_pose, bundle.pose_estimate(x))
    penalty = gradient_penalty(bundle.critic_score, x, fake, gamma, gen)

    total = l1 * gap + l2 * id_loglik - l3 * pose_term - l4 * penalty
    return DiscriminatorLossBreakdown(gap, id_loglik, pose_term, penalty, total,
                                      (l1, l2, l3, l4), float(gamma))
