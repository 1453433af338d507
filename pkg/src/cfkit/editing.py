"""Counterfactual image synthesis.

Flow per image: invert the latent trajectory, tune a per-timestep null-text
schedule so the reverse path reconstructs the source, then re-run the
denoising pass with the perturbed caption injected after the first tau*K
steps. Candidate edits across a tau grid are ranked by directional
similarity between image-space and text-space changes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .perturbation import CaptionEdit, cosine_similarity
from .types import EmbeddingVector, ImageTensor, LatentVector, ZeroVectorError


@dataclass
class InversionTrajectory:
    """Latents z_0 .. z_K from running the sampler backward, plus the caption conditioning."""

    latents: list[LatentVector]
    caption_embedding: EmbeddingVector
    K: int

    def __post_init__(self):
        if len(self.latents) != self.K + 1:
            raise ValueError(f"expected {self.K + 1} latents, got {len(self.latents)}")
        for k, z in enumerate(self.latents):
            if z.timestep != k:
                raise ValueError(f"latent {k} has timestep {z.timestep}")


@dataclass
class NullTextSchedule:
    """Optimized null embeddings (index k-1 holds the embedding for step k)."""

    embeddings: list[EmbeddingVector]
    residuals: list[float]
    tolerance: float = 1e-5

    def __post_init__(self):
        if len(self.embeddings) != len(self.residuals):
            raise ValueError("one residual per embedding required")
        if any(not np.isfinite(r) or r < 0 for r in self.residuals):
            raise ValueError("residuals must be finite and >= 0")

    @property
    def K(self) -> int:
        return len(self.embeddings)

    def non_converged_steps(self) -> list[int]:
        """Timesteps whose final residual exceeded the tolerance."""
        return [k for k in range(1, self.K + 1) if self.residuals[k - 1] > self.tolerance]


@dataclass(frozen=True)
class EditRequest:
    image: ImageTensor
    original_caption: str
    perturbed_caption: str
    tau: float

    def __post_init__(self):
        if not self.original_caption or not self.perturbed_caption:
            raise ValueError("captions must be nonempty")
        if self.original_caption == self.perturbed_caption:
            raise ValueError("captions must be distinct")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")


@dataclass
class CounterfactualExample:
    """A generated counterfactual with full provenance."""

    image: ImageTensor
    source_image_id: str
    edit: CaptionEdit
    tau: float
    directional_score: float
    gt_class: str

    def __post_init__(self):
        if not 0.0 <= self.directional_score <= 2.0:
            raise ValueError("directional score must lie in [0, 2]")


def ddim_invert(z0: LatentVector, caption_embedding: EmbeddingVector, K: int,
                generator_backend) -> InversionTrajectory:
    """Run the sampler backward for K steps starting from z0 (timestep 0)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if z0.timestep != 0:
        raise ValueError("inversion starts from a timestep-0 latent")
    null = generator_backend.null_embedding()
    latents = [z0]
    z = z0
    for k in range(1, K + 1):
        try:
            z = generator_backend.invert_step(z, caption_embedding, null)
        except Exception as exc:
            raise RuntimeError(
                f"inversion failed at step {k}/{K} ({len(latents)} latents completed)"
            ) from exc
        latents.append(z)
    return InversionTrajectory(latents, caption_embedding, K)


def _step_objective(generator_backend, z_hat: LatentVector, k: int,
                    text: EmbeddingVector, null: EmbeddingVector,
                    target: np.ndarray) -> tuple[float, np.ndarray, LatentVector]:
    pred = generator_backend.denoise_step(z_hat, k, text, null)
    residual = target - pred.data
    return float(np.dot(residual, residual)), residual, pred


def optimize_null_text(trajectory: InversionTrajectory, steps_per_timestep: int = 10,
                       learning_rate: float | None = None, tolerance: float = 1e-5,
                       generator_backend=None) -> NullTextSchedule:
    """Tune the null embedding at each timestep to minimize per-step reconstruction error.

    Works from k = K down to 1, threading the reconstructed latent. With
    learning_rate=None each gradient step uses an exact quadratic line search
    (one extra sampler call), which converges in a single iteration on any
    sampler that is affine in the null embedding; a fixed learning rate runs
    plain gradient descent.
    """
    if steps_per_timestep < 1:
        raise ValueError("steps_per_timestep must be >= 1")
    if tolerance <= 0:
        raise ValueError("tolerance must be > 0")
    K = trajectory.K
    text = trajectory.caption_embedding
    embeddings: list[EmbeddingVector] = [None] * K
    residuals: list[float] = [0.0] * K
    z_hat = trajectory.latents[K]

    for k in range(K, 0, -1):
        target = trajectory.latents[k - 1].data
        null = generator_backend.null_embedding()
        loss, res, pred = _step_objective(generator_backend, z_hat, k, text, null, target)
        for _ in range(steps_per_timestep):
            if loss <= 1e-30:
                break
            grad = generator_backend.grad_null(z_hat, k, text, null, res)
            gnorm2 = float(np.dot(grad, grad))
            if gnorm2 == 0.0:
                break
            if learning_rate is None:
                # Quadratic fit along -grad: f(t) = f0 - t*|g|^2 + t^2*c2.
                probe = EmbeddingVector(null.data - grad)
                f1, _, _ = _step_objective(generator_backend, z_hat, k, text, probe, target)
                c2 = f1 - loss + gnorm2
                step = 0.5 * gnorm2 / c2 if c2 > 0 else 1.0
            else:
                step = learning_rate
            null = EmbeddingVector(null.data - step * grad)
            loss, res, pred = _step_objective(generator_backend, z_hat, k, text, null, target)
        embeddings[k - 1] = null
        residuals[k - 1] = loss
        z_hat = generator_backend.denoise_step(z_hat, k, text, null)
    return NullTextSchedule(embeddings, residuals, tolerance)


def edit_image(request: EditRequest, schedule: NullTextSchedule,
               trajectory: InversionTrajectory, generator_backend) -> ImageTensor:
    """Denoise from z_K, switching conditioning to the perturbed caption after tau*K steps."""
    if schedule.K != trajectory.K:
        raise ValueError(f"schedule K={schedule.K} != trajectory K={trajectory.K}")
    K = trajectory.K
    original = trajectory.caption_embedding
    perturbed = generator_backend.embed_caption(request.perturbed_caption)
    n_original = int(round(request.tau * K))
    z = trajectory.latents[K]
    for i, k in enumerate(range(K, 0, -1)):
        cond = original if i < n_original else perturbed
        z = generator_backend.denoise_step(z, k, cond, schedule.embeddings[k - 1])
    return generator_backend.decode_latent(
        z, f"{request.image.id}__edit_tau{request.tau:g}"
    )


def reconstruct(trajectory: InversionTrajectory, schedule: NullTextSchedule,
                generator_backend) -> LatentVector:
    """Full denoising pass with the original conditioning and tuned schedule."""
    if schedule.K != trajectory.K:
        raise ValueError("schedule and trajectory disagree on K")
    z = trajectory.latents[trajectory.K]
    for k in range(trajectory.K, 0, -1):
        z = generator_backend.denoise_step(z, k, trajectory.caption_embedding,
                                           schedule.embeddings[k - 1])
    return z


def directional_similarity(x: ImageTensor, x_cf: ImageTensor, c: str, c_cf: str,
                           encoder_backend) -> float:
    """1 - cos(image-embedding delta, text-embedding delta); 0 is perfect alignment."""
    img_delta = encoder_backend.encode_image(x).data - encoder_backend.encode_image(x_cf).data
    txt_delta = encoder_backend.encode_text(c).data - encoder_backend.encode_text(c_cf).data
    ni, nt = np.linalg.norm(img_delta), np.linalg.norm(txt_delta)
    if ni == 0.0 or nt == 0.0:
        raise ZeroVectorError("embedding delta is zero; edit produced no measurable change")
    cos = float(np.clip(np.dot(img_delta, txt_delta) / (ni * nt), -1.0, 1.0))
    return 1.0 - cos


def select_tau(image: ImageTensor, edit: CaptionEdit, tau_grid: list[float], *,
               generator_backend, encoder_backend, gt_class: str = "",
               trajectory: InversionTrajectory | None = None,
               schedule: NullTextSchedule | None = None,
               K: int | None = None) -> tuple[float, CounterfactualExample]:
    """Generate one candidate per tau and keep the best-aligned one.

    Ties in the directional score go to the larger tau (the more conservative
    edit). Inversion and null-text tuning are reused across the grid; callers
    may pass a precomputed trajectory/schedule.
    """
    if not tau_grid:
        raise ValueError("tau_grid must be nonempty")
    if any(not 0.0 <= t <= 1.0 for t in tau_grid):
        raise ValueError("every tau must lie in [0, 1]")
    if trajectory is None:
        z0 = generator_backend.encode_image(image)
        cap_emb = generator_backend.embed_caption(edit.original)
        trajectory = ddim_invert(z0, cap_emb, K or generator_backend.num_steps, generator_backend)
    if schedule is None:
        schedule = optimize_null_text(trajectory, generator_backend=generator_backend)

    best: CounterfactualExample | None = None
    failures: list[str] = []
    for tau in tau_grid:
        request = EditRequest(image, edit.original, edit.perturbed, tau)
        candidate = edit_image(request, schedule, trajectory, generator_backend)
        try:
            score = directional_similarity(image, candidate, edit.original, edit.perturbed,
                                           encoder_backend)
        except ZeroVectorError as exc:
            failures.append(f"tau={tau:g}: {exc}")
            continue
        example = CounterfactualExample(candidate, image.id, edit, tau, score, gt_class)
        if best is None or score < best.directional_score or (
            score == best.directional_score and tau > best.tau
        ):
            best = example
    if best is None:
        raise ZeroVectorError(
            "every tau candidate failed: " + "; ".join(failures)
        )
    return best.tau, best


def save_counterfactuals(examples: list[CounterfactualExample], out_dir: str | Path) -> Path:
    """Persist a counterfactual set: PNGs plus a metadata JSON-lines file."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "metadata.jsonl").open("w") as meta:
        for ex in examples:
            fname = f"{ex.source_image_id}__{ex.edit.factor.value}__{ex.tau:g}.png"
            u8 = np.round(ex.image.data * 255.0).astype(np.uint8)
            Image.fromarray(np.moveaxis(u8, 0, -1), mode="RGB").save(out / fname)
            meta.write(json.dumps({
                "file": fname,
                "source_image_id": ex.source_image_id,
                "edit": json.loads(ex.edit.to_json()),
                "tau": ex.tau,
                "directional_score": ex.directional_score,
                "gt_class": ex.gt_class,
            }, sort_keys=True) + "\n")
    return out


def load_counterfactuals(in_dir: str | Path) -> list[CounterfactualExample]:
    from PIL import Image

    src = Path(in_dir)
    out = []
    with (src / "metadata.jsonl").open() as meta:
        for line in meta:
            d = json.loads(line)
            arr = np.asarray(Image.open(src / d["file"]), dtype=np.float64) / 255.0
            image = ImageTensor(np.moveaxis(arr, -1, 0), d["file"].rsplit(".", 1)[0])
            out.append(CounterfactualExample(
                image=image,
                source_image_id=d["source_image_id"],
                edit=CaptionEdit.from_json(json.dumps(d["edit"])),
                tau=d["tau"],
                directional_score=d["directional_score"],
                gt_class=d["gt_class"],
            ))
    return out
