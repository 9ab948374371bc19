"""Post-hoc diagnostics for personalized checkpoints and run logs.

- ``delta_noise``: mean squared gap between the prior's and the fine-tuned
  model's noise predictions on a fixed probe set.
- ``gamma_report``: per-bin indicator curves from an indicator log.
- ``sample``: ancestral sampling with classifier-free guidance to a PNG grid.
- ``export_attention_maps``: per-token cross-attention maps of both models.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torchvision.utils import save_image

from aptdiff.checkpoint import Checkpoint, CheckpointStore
from aptdiff.cond import build_pair, encode_caption, fill_template
from aptdiff.constants import GUIDANCE_SCALE
from aptdiff.corpus import CorpusItem, make_corpus, make_reference_set
from aptdiff.indicator import BinMap
from aptdiff.plotting import plot_attention_maps, plot_gamma_curves
from aptdiff.runlog import IndicatorLog, LogParseError
from aptdiff.schedule import cfg_combine, q_sample, sample_step
from aptdiff.trainer import CHECKPOINT_DIR, schedule_for

logger = logging.getLogger(__name__)

CONDITIONING_MODES = ("training", "class")
LOW_NOISE_BINS = 3


# ---------------------------------------------------------------------------
# Probe sets
# ---------------------------------------------------------------------------


@dataclass
class ProbeSet:
    """Fixed (x0, eps, t, caption) tuples; timesteps are stratified over bins."""

    x0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    template_index: torch.Tensor
    templates: list[str]
    seed: int

    def __len__(self) -> int:
        return int(self.t.shape[0])


def make_probe_set(
    corpus: list[CorpusItem],
    templates: list[str],
    binmap: BinMap,
    n: int = 64,
    seed: int = 1234,
) -> ProbeSet:
    """Draw ``n`` probes: probe ``i`` gets a timestep from bin ``i mod B``."""
    if n < 1:
        raise ValueError("Probe set must hold at least one probe")
    if not corpus or not templates:
        raise ValueError("Probe sets need a non-empty corpus and at least one caption template")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(corpus), size=n, replace=len(corpus) < n)
    t = [(i % binmap.B) * binmap.width + int(rng.integers(binmap.width)) for i in range(n)]
    template_index = rng.integers(len(templates), size=n)
    x0 = torch.from_numpy(np.stack([corpus[int(i)].image for i in idx]))
    eps = torch.randn(x0.shape, generator=torch.Generator().manual_seed(seed))
    return ProbeSet(
        x0=x0,
        eps=eps,
        t=torch.tensor(t, dtype=torch.long),
        template_index=torch.from_numpy(template_index).long(),
        templates=list(templates),
        seed=seed,
    )


def probe_set_for(checkpoint: Checkpoint, n: int = 64, seed: int = 1234) -> ProbeSet:
    """Probe set drawn from the corpus the checkpoint's prior was trained on."""
    corpus_meta = checkpoint.metadata.get("corpus")
    templates = checkpoint.metadata.get("caption_templates")
    if not corpus_meta or not templates:
        raise ValueError("Checkpoint metadata lacks corpus or caption template information")
    corpus = make_corpus(
        corpus_meta["size"], corpus_meta.get("image_size", 32), corpus_meta.get("seed", 0)
    )
    schedule = schedule_for(checkpoint)
    binmap = BinMap(schedule.T, int(checkpoint.metadata.get("bins", 10)))
    return make_probe_set(corpus, templates, binmap, n, seed)


# ---------------------------------------------------------------------------
# Delta noise
# ---------------------------------------------------------------------------


@dataclass
class DeltaNoiseReport:
    steps: list[int]
    values: list[float]
    probe_seed: int
    conditioning: str = "training"

    @property
    def first(self) -> float:
        return self.values[0] if self.values else 0.0

    @property
    def final(self) -> float:
        return self.values[-1] if self.values else 0.0

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "delta_noise": self.values,
            "probe_seed": self.probe_seed,
            "conditioning": self.conditioning,
        }


@torch.no_grad()
def delta_noise(
    checkpoint: Checkpoint,
    probe_set: ProbeSet,
    conditioning: str = "training",
    adapter_scale: float = 1.0,
    batch_size: int = 16,
) -> float:
    """Mean over probes of mean((eps_prior - eps_finetuned)^2).

    The prior (adapters off) always sees the class caption. The fine-tuned
    model (adapters on) sees the identifier caption with
    ``conditioning="training"`` or the class caption with ``"class"``.

    Raises:
        ValueError: On an empty probe set, an unknown conditioning mode, or a
            checkpoint without adapters (there is no fine-tuned model).
    """
    if len(probe_set) == 0:
        raise ValueError("Probe set is empty")
    if conditioning not in CONDITIONING_MODES:
        raise ValueError(f"Unknown conditioning '{conditioning}' (use {CONDITIONING_MODES})")
    if not checkpoint.has_adapters:
        raise ValueError(
            "Checkpoint has no adapters: delta noise compares the fine-tuned "
            "model against its prior"
        )
    meta = checkpoint.metadata
    net, vocab = checkpoint.build()
    net.eval()
    net.set_adapter_scale(adapter_scale)
    schedule = schedule_for(checkpoint)
    pad_to = net.config.max_tokens
    pairs = [
        build_pair(tpl, meta["identifier"], meta["class_word"], vocab, pad_to=pad_to)
        for tpl in probe_set.templates
    ]
    class_ids = torch.tensor([p.tokens_class for p in pairs])
    theta_ids = (
        torch.tensor([p.tokens_star for p in pairs]) if conditioning == "training" else class_ids
    )

    total = 0.0
    n = len(probe_set)
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        t = probe_set.t[sl]
        x_t = q_sample(probe_set.x0[sl], probe_set.eps[sl], t, schedule)
        which = probe_set.template_index[sl]
        eps_phi, _ = net(x_t, t, vocab.embed(class_ids[which]), adapters_on=False)
        eps_theta, _ = net(x_t, t, vocab.embed(theta_ids[which]), adapters_on=True)
        diff = (eps_phi.double() - eps_theta.double()).pow(2).flatten(1).mean(dim=1)
        total += float(diff.sum())
    return total / n


def delta_noise_series(
    checkpoints: list[Checkpoint],
    probe_set: ProbeSet,
    conditioning: str = "training",
) -> DeltaNoiseReport:
    """Delta noise of each checkpoint, ordered by training step."""
    ordered = sorted(checkpoints, key=lambda c: c.step)
    values = [delta_noise(c, probe_set, conditioning) for c in ordered]
    return DeltaNoiseReport(
        steps=[c.step for c in ordered],
        values=values,
        probe_seed=probe_set.seed,
        conditioning=conditioning,
    )


def run_checkpoints(run_dir: str | Path, include_initial: bool = False) -> list[Checkpoint]:
    """All periodic checkpoints of a personalization run, by step."""
    store = CheckpointStore(Path(run_dir) / CHECKPOINT_DIR)
    entries = store.list_checkpoints()
    if not entries:
        raise FileNotFoundError(f"No checkpoints in run directory {Path(run_dir).name}")
    return [
        store.load(e["name"]) for e in entries if include_initial or e["step"] > 0
    ]


def delta_noise_for_run(
    run_dir: str | Path,
    num_probes: int = 64,
    probe_seed: int = 1234,
    conditioning: str = "training",
) -> DeltaNoiseReport:
    checkpoints = run_checkpoints(run_dir)
    if not checkpoints:
        raise ValueError("Run has no checkpoints after step 0")
    probes = probe_set_for(checkpoints[0], num_probes, probe_seed)
    return delta_noise_series(checkpoints, probes, conditioning)


# ---------------------------------------------------------------------------
# Gamma report
# ---------------------------------------------------------------------------


@dataclass
class GammaReport:
    curves: dict[int, list[tuple[int, float]]]
    final: list[float]
    first_exceed: list[int | None]
    threshold: float = 0.5
    plot_path: Path | None = field(default=None)

    @property
    def group_size(self) -> int:
        """Bins per low/high-noise group; the two groups never overlap."""
        return max(1, min(LOW_NOISE_BINS, len(self.final) // 2))

    @property
    def low_noise_mean(self) -> float:
        """Mean final gamma over the lowest-noise bins (smallest t)."""
        return float(np.mean(self.final[: self.group_size]))

    @property
    def high_noise_mean(self) -> float:
        """Mean final gamma over the highest-noise bins (largest t)."""
        return float(np.mean(self.final[-self.group_size :]))

    def to_dict(self) -> dict:
        return {
            "final_gamma": self.final,
            "first_step_above_threshold": self.first_exceed,
            "threshold": self.threshold,
            "low_noise_mean": self.low_noise_mean,
            "high_noise_mean": self.high_noise_mean,
            "plot": str(self.plot_path) if self.plot_path else None,
        }


def gamma_report(
    indicator_log: str | Path,
    num_bins: int,
    out_png: str | Path | None = None,
    threshold: float = 0.5,
) -> GammaReport:
    """Per-bin gamma-vs-step series and summary from an indicator log.

    Raises:
        LogParseError: With the offending line number when the log is malformed.
    """
    log = IndicatorLog(indicator_log)
    curves: dict[int, list[tuple[int, float]]] = {b: [] for b in range(num_bins)}
    for lineno, row in enumerate(log.read(), start=2):
        if not 0 <= row["bin"] < num_bins:
            raise LogParseError(log.path, lineno, f"bin {row['bin']} outside [0, {num_bins})")
        curves[row["bin"]].append((row["step"], row["gamma"]))

    final = [series[-1][1] if series else 0.0 for _, series in sorted(curves.items())]
    first_exceed: list[int | None] = []
    for _, series in sorted(curves.items()):
        hit = next((step for step, g in series if g > threshold), None)
        first_exceed.append(hit)

    plot_path = None
    if out_png is not None:
        plot_path = plot_gamma_curves(curves, out_png, title=Path(indicator_log).parent.name)
    return GammaReport(curves, final, first_exceed, threshold, plot_path)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@torch.no_grad()
def sample(
    checkpoint: Checkpoint,
    caption: str,
    n: int = 4,
    guidance_scale: float = GUIDANCE_SCALE,
    seed: int = 0,
    out_path: str | Path | None = None,
    adapters: bool = True,
) -> torch.Tensor:
    """Ancestral sampling from pure noise with classifier-free guidance.

    Returns images in [-1, 1], shape (n, C, H, W); writes a PNG grid when
    ``out_path`` is given.

    Raises:
        UnknownTokenError: If the caption uses a word the vocabulary lacks.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    net, vocab = checkpoint.build()
    net.eval()
    cfg = net.config
    schedule = schedule_for(checkpoint)
    adapters_on = adapters and checkpoint.has_adapters

    cond_ids = torch.tensor([encode_caption(caption, vocab, pad_to=cfg.max_tokens)] * n)
    null_ids = torch.tensor([vocab.null_ids(cfg.max_tokens)] * n)
    cond = vocab.embed(cond_ids)
    uncond = vocab.embed(null_ids)

    generator = torch.Generator().manual_seed(seed)
    x = torch.randn((n, cfg.in_channels, cfg.image_size, cfg.image_size), generator=generator)
    for t in reversed(range(schedule.T)):
        eps_u, _ = net(x, t, uncond, adapters_on=adapters_on)
        if guidance_scale == 0.0:
            eps = eps_u
        else:
            eps_c, _ = net(x, t, cond, adapters_on=adapters_on)
            eps = cfg_combine(eps_u, eps_c, guidance_scale)
        x = sample_step(x, eps, t, schedule, generator)

    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        nrow = max(1, math.ceil(math.sqrt(n)))
        save_image((x.clamp(-1.0, 1.0) + 1.0) / 2.0, out_path, nrow=nrow, padding=1)
        logger.info("Wrote %d samples to %s", n, out_path.name)
    return x


# ---------------------------------------------------------------------------
# Attention maps
# ---------------------------------------------------------------------------


def _token_maps(attn: torch.Tensor, n_tokens: int) -> np.ndarray:
    """(1, H, Q, K) probabilities -> (n_tokens, side, side) head-summed maps."""
    summed = attn[0].sum(dim=0)
    side = int(math.isqrt(summed.shape[0]))
    maps = summed[:, :n_tokens].T.reshape(n_tokens, side, side)
    return maps.detach().numpy()


@torch.no_grad()
def export_attention_maps(
    checkpoint: Checkpoint,
    out_path: str | Path,
    caption_template: str | None = None,
    t: int | None = None,
    seed: int = 0,
    image: np.ndarray | None = None,
) -> dict:
    """Plot per-token cross-attention maps of the fine-tuned model (identifier
    caption) next to the prior's (class caption) at every tap.

    Returns the squared map difference per tap and token.
    """
    meta = checkpoint.metadata
    if "identifier" not in meta:
        raise ValueError("Attention maps need a personalized checkpoint")
    net, vocab = checkpoint.build()
    net.eval()
    cfg = net.config
    schedule = schedule_for(checkpoint)
    template = caption_template or meta["caption_templates"][0]
    t = schedule.T // 2 if t is None else int(t)
    if image is None:
        image = make_reference_set(1, cfg.image_size)[0].image

    pair = build_pair(
        template, meta["identifier"], meta["class_word"], vocab, pad_to=cfg.max_tokens
    )
    x0 = torch.from_numpy(np.asarray(image, dtype=np.float32))[None]
    eps = torch.randn(x0.shape, generator=torch.Generator().manual_seed(seed))
    x_t = q_sample(x0, eps, t, schedule)
    _, taps_theta = net(
        x_t, t, vocab.embed(torch.tensor([pair.tokens_star])), adapters_on=True, capture_taps=True
    )
    _, taps_phi = net(
        x_t, t, vocab.embed(torch.tensor([pair.tokens_class])), adapters_on=False, capture_taps=True
    )

    words = fill_template(template, meta["identifier"])
    rows: dict[str, np.ndarray] = {}
    differences: dict[str, dict[str, float]] = {}
    for key in cfg.tap_ids():
        theta = _token_maps(taps_theta.attentions[key], len(words))
        phi = _token_maps(taps_phi.attentions[key], len(words))
        rows[f"tuned {key}"] = theta
        rows[f"prior {key}"] = phi
        differences[key] = {
            f"{i}:{w}": float(((theta[i] - phi[i]) ** 2).sum()) for i, w in enumerate(words)
        }
    plot_attention_maps(rows, words, out_path)
    return {"path": str(out_path), "t": t, "template": template, "difference": differences}
