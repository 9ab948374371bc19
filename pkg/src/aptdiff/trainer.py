"""Pretraining of the toy prior and adaptive personalization.

Personalization runs the same network twice per step: adapters on with the
identifier caption (fine-tuned model) and adapters off with the class
caption (prior). The prior pass drives the overfitting indicator and the
regularizers; only adapters and the identifier embedding are optimized.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from aptdiff.augment import AugmentParams, AugmentPolicy, maybe_augment
from aptdiff.checkpoint import (
    Checkpoint,
    CheckpointStore,
    base_checksum,
    load_checkpoint,
)
from aptdiff.cond import ConditioningPair, Vocabulary, build_pair, fill_template
from aptdiff.config import AptConfig, DiffusionConfig, PretrainConfig
from aptdiff.corpus import CorpusItem, vocabulary_words
from aptdiff.indicator import (
    BinMap,
    IndicatorState,
    adaptive_weight,
    augment_probability,
    bin_of,
    ema_update,
    new_indicator,
)
from aptdiff.metrics import RunMetrics
from aptdiff.regularizers import RegWeights, attn_align_loss, stat_losses, total_loss
from aptdiff.runlog import IndicatorLog, TrainingLog
from aptdiff.schedule import NoiseSchedule, denoising_loss, make_schedule, q_sample
from aptdiff.tinynet import NetConfig, build_net

logger = logging.getLogger(__name__)

RUN_STATE_FILE = "run_state.pt"
TRAINING_LOG_FILE = "training_log.csv"
INDICATOR_LOG_FILE = "indicator_log.csv"
METRICS_FILE = "metrics.json"
CHECKPOINT_DIR = "checkpoints"


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN/inf; ``dump_path`` points at the diagnostic dump."""

    def __init__(self, message: str, dump_path: Path | None = None) -> None:
        super().__init__(message)
        self.dump_path = dump_path


class MissingPriorError(RuntimeError):
    """Personalization was started without a usable prior checkpoint."""


def schedule_for(checkpoint: Checkpoint) -> NoiseSchedule:
    """Noise schedule the checkpoint's prior was trained with."""
    diffusion = DiffusionConfig(**checkpoint.metadata.get("diffusion", {}))
    return make_schedule(diffusion.num_timesteps, diffusion.beta_start, diffusion.beta_end)


def stack_images(items: list[CorpusItem]) -> torch.Tensor:
    return torch.from_numpy(np.stack([item.image for item in items]))


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def build_vocabulary(corpus: list[CorpusItem], token_dim: int, seed: int) -> Vocabulary:
    words = list(vocabulary_words())
    for item in corpus:
        words.extend(fill_template(item.caption_template, item.class_word))
    generator = torch.Generator().manual_seed(seed + 1)
    return Vocabulary(list(dict.fromkeys(words)), token_dim, generator=generator)


def _encode_corpus(corpus: list[CorpusItem], vocab: Vocabulary, max_tokens: int) -> torch.Tensor:
    ids = [
        vocab.encode(fill_template(item.caption_template, item.class_word), pad_to=max_tokens)
        for item in corpus
    ]
    return torch.tensor(ids, dtype=torch.long)


@torch.no_grad()
def _validation_loss(
    net, vocab: Vocabulary, images, ids, schedule: NoiseSchedule, seed: int
) -> float:
    generator = torch.Generator().manual_seed(seed + 2)
    t = torch.randint(0, schedule.T, (images.shape[0],), generator=generator)
    eps = torch.randn(images.shape, generator=generator)
    x_t = q_sample(images, eps, t, schedule)
    eps_hat, _ = net(x_t, t, vocab.embed(ids))
    return float(denoising_loss(eps, eps_hat).mean())


def pretrain(
    corpus: list[CorpusItem],
    net_config: NetConfig,
    steps: int,
    seed: int,
    *,
    settings: PretrainConfig | None = None,
    diffusion: DiffusionConfig | None = None,
    metrics: RunMetrics | None = None,
) -> Checkpoint:
    """Train base weights and token embeddings with the plain denoising loss.

    Captions are replaced by the null sequence with probability
    ``settings.p_uncond`` so the prior supports classifier-free guidance.

    Raises:
        ValueError: If the corpus is empty or ``steps`` is negative.
    """
    if not corpus:
        raise ValueError("Pretraining corpus is empty")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    settings = settings or PretrainConfig()
    diffusion = diffusion or DiffusionConfig()
    metrics = metrics or RunMetrics("pretrain")
    schedule = make_schedule(diffusion.num_timesteps, diffusion.beta_start, diffusion.beta_end)

    net = build_net(net_config, seed)
    vocab = build_vocabulary(corpus, net_config.token_dim, seed)
    images = stack_images(corpus)
    ids = _encode_corpus(corpus, vocab, net_config.max_tokens)
    null_ids = torch.tensor(vocab.null_ids(net_config.max_tokens), dtype=torch.long)

    val_n = min(settings.val_size, len(corpus))
    init_val = _validation_loss(net, vocab, images[:val_n], ids[:val_n], schedule, seed)

    params = list(net.parameters()) + [vocab.weight]
    optimizer = torch.optim.AdamW(params, lr=settings.lr, weight_decay=settings.weight_decay)
    data_rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed)
    logger.info(
        "Pretraining prior: %d images, %d steps, batch %d", len(corpus), steps, settings.batch_size
    )

    net.train()
    running = 0.0
    for step in range(1, steps + 1):
        idx = torch.from_numpy(data_rng.integers(len(corpus), size=settings.batch_size))
        x0 = images[idx]
        t = torch.randint(0, schedule.T, (x0.shape[0],), generator=generator)
        eps = torch.randn(x0.shape, generator=generator)
        drop = torch.rand(x0.shape[0], generator=generator) < settings.p_uncond
        batch_ids = torch.where(drop[:, None], null_ids[None, :], ids[idx])

        with metrics.timer("pretrain"):
            eps_hat, _ = net(q_sample(x0, eps, t, schedule), t, vocab.embed(batch_ids))
            loss = denoising_loss(eps, eps_hat).mean()
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        value = float(loss)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"Pretraining loss became {value} at step {step}")
        running += value
        if step % settings.log_every == 0:
            logger.info("pretrain step %d/%d  loss %.5f", step, steps, running / settings.log_every)
            running = 0.0
    net.eval()

    final_val = _validation_loss(net, vocab, images[:val_n], ids[:val_n], schedule, seed)
    logger.info("Pretraining done: validation loss %.5f -> %.5f", init_val, final_val)
    return Checkpoint.from_model(
        net,
        vocab,
        metadata={
            "kind": "prior",
            "step": steps,
            "seed": seed,
            "diffusion": asdict(diffusion),
            "corpus": {
                "size": len(corpus),
                "seed": seed,
                "image_size": net_config.image_size,
            },
            "init_val_loss": init_val,
            "final_val_loss": final_val,
        },
    )


# ---------------------------------------------------------------------------
# Personalization state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepReport:
    """Everything one personalization step computed, in log-column order."""

    step: int
    t: int
    bin: int
    L_DM_theta: float
    L_DM_phi: float
    gamma: float
    weight: float
    L_mu: float
    L_sigma: float
    L_attn: float
    total: float
    augment: AugmentParams
    gamma_snapshot: tuple[float, ...] = ()
    ema_phi: float = 0.0
    ema_theta: float = 0.0
    gamma_after: float = 0.0

    def log_row(self) -> dict:
        return {
            "step": self.step,
            "t": self.t,
            "bin": self.bin,
            "L_DM_theta": self.L_DM_theta,
            "L_DM_phi": self.L_DM_phi,
            "gamma": self.gamma,
            "weight": self.weight,
            "L_mu": self.L_mu,
            "L_sigma": self.L_sigma,
            "L_attn": self.L_attn,
            "total": self.total,
            "augmented": self.augment.applied,
            "aug_scale": self.augment.scale,
            "aug_angle": self.augment.angle,
        }

    def indicator_row(self) -> dict:
        return {
            "step": self.step,
            "bin": self.bin,
            "ema_phi": self.ema_phi,
            "ema_theta": self.ema_theta,
            "gamma": self.gamma_after,
        }


@dataclass
class RunState:
    step: int
    indicator: IndicatorState
    data_rng: np.random.Generator
    augment_rng: np.random.Generator
    noise_rng: torch.Generator

    @classmethod
    def fresh(cls, seed: int, indicator: IndicatorState) -> RunState:
        data_seq, augment_seq = np.random.SeedSequence(seed).spawn(2)
        return cls(
            step=0,
            indicator=indicator,
            data_rng=np.random.default_rng(data_seq),
            augment_rng=np.random.default_rng(augment_seq),
            noise_rng=torch.Generator().manual_seed(seed),
        )

    def to_payload(self) -> dict:
        return {
            "step": self.step,
            "indicator": json.dumps(self.indicator.to_dict()),
            "data_rng": json.dumps(self.data_rng.bit_generator.state),
            "augment_rng": json.dumps(self.augment_rng.bit_generator.state),
            "noise_rng": self.noise_rng.get_state(),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> RunState:
        data_rng = np.random.default_rng()
        data_rng.bit_generator.state = json.loads(payload["data_rng"])
        augment_rng = np.random.default_rng()
        augment_rng.bit_generator.state = json.loads(payload["augment_rng"])
        noise_rng = torch.Generator()
        noise_rng.set_state(payload["noise_rng"])
        return cls(
            step=int(payload["step"]),
            indicator=IndicatorState.from_dict(json.loads(payload["indicator"])),
            data_rng=data_rng,
            augment_rng=augment_rng,
            noise_rng=noise_rng,
        )


@dataclass
class Batch:
    images: torch.Tensor
    tokens_star: torch.Tensor
    tokens_class: torch.Tensor
    indices: tuple[int, ...] = field(default=())


# ---------------------------------------------------------------------------
# Personalizer
# ---------------------------------------------------------------------------


class Personalizer:
    """Owns the network, optimizer and indicator of one personalization run."""

    def __init__(
        self,
        prior: Checkpoint,
        references: list[CorpusItem],
        config: AptConfig,
        dump_dir: Path | None = None,
    ) -> None:
        if prior is None:
            raise MissingPriorError("A prior checkpoint is required for personalization")
        if prior.has_adapters:
            raise ValueError("Prior checkpoint already carries adapters")
        if not 1 <= len(references) <= 10:
            raise ValueError(f"Personalization needs 1-10 reference images, got {len(references)}")
        class_words = {item.class_word for item in references}
        if len(class_words) != 1:
            raise ValueError(f"References must share one class word, got {sorted(class_words)}")

        self.config = config
        self.prior = prior
        self.dump_dir = dump_dir
        self.schedule = schedule_for(prior)
        config.validate(self.schedule.T)
        self.binmap = BinMap(self.schedule.T, config.bins)
        self.class_word = class_words.pop()

        self.net, self.vocab = prior.build()
        self.prior_checksum = base_checksum(self.net, self.vocab)
        self.vocab.register_identifier(config.identifier, self.class_word)
        self.net.attach_adapters(config.adapter_rank, config.adapter_alpha, seed=config.seed)
        self.net.freeze_base()
        self.vocab.freeze_base()
        self.net.eval()

        max_tokens = self.net.config.max_tokens
        self.templates = [item.caption_template for item in references]
        self.pairs: list[ConditioningPair] = [
            build_pair(t, config.identifier, self.class_word, self.vocab, pad_to=max_tokens)
            for t in self.templates
        ]
        self.images = stack_images(references)
        self.policy = AugmentPolicy(
            scale_range=config.scale_range,
            rotation_range=config.rotation_range,
            fill=config.aug_fill,
            p_max=config.p_max,
        )
        self.weights = RegWeights(config.lambda_dist, config.lambda_attn)
        self.optimizer = torch.optim.AdamW(
            [
                {"params": self.net.adapter_params(), "lr": config.lr_adapter},
                {"params": self.vocab.trainable_params(), "lr": config.lr_token},
            ],
            weight_decay=config.weight_decay,
        )
        self.state = RunState.fresh(
            config.seed, new_indicator(self.binmap, config.ema_alpha, config.temperature_mode)
        )

    # -- data ---------------------------------------------------------------

    def sample_batch(self) -> Batch:
        idx = self.state.data_rng.integers(len(self.pairs), size=self.config.batch_size)
        chosen = [int(i) for i in idx]
        return Batch(
            images=self.images[chosen],
            tokens_star=torch.tensor([self.pairs[i].tokens_star for i in chosen]),
            tokens_class=torch.tensor([self.pairs[i].tokens_class for i in chosen]),
            indices=tuple(chosen),
        )

    # -- one step -----------------------------------------------------------

    def personalize_step(self, batch: Batch) -> StepReport:
        cfg = self.config
        state = self.state
        step = state.step + 1

        # 1. timestep, bin and the gamma stored after the previous step
        t = int(torch.randint(0, self.schedule.T, (1,), generator=state.noise_rng))
        b = bin_of(t, self.binmap)
        gamma = state.indicator.gamma[b]

        # 2. adaptive augmentation of the clean images
        x0 = batch.images
        params = AugmentParams(applied=False)
        if cfg.ata:
            p = augment_probability(gamma, cfg.p_max)
            x0, _, params = maybe_augment(x0, p, self.policy, state.augment_rng)

        # 3. shared noise and x_t for both passes
        eps = torch.randn(x0.shape, generator=state.noise_rng)
        x_t = q_sample(x0, eps, t, self.schedule)

        # 4-5. fine-tuned pass with c*, prior pass with c
        need_taps = cfg.rs or cfg.aa
        eps_theta, taps_theta = self.net(
            x_t, t, self.vocab.embed(batch.tokens_star), adapters_on=True, capture_taps=need_taps
        )
        with torch.no_grad():
            eps_phi, taps_phi = self.net(
                x_t,
                t,
                self.vocab.embed(batch.tokens_class),
                adapters_on=False,
                capture_taps=need_taps,
            )

        # 6-8. losses
        l_theta = denoising_loss(eps, eps_theta).mean()
        l_phi = denoising_loss(eps, eps_phi).mean()
        weight = adaptive_weight(gamma) if cfg.ata else 1.0
        weighted = weight * l_theta
        zero = torch.zeros(())
        l_mu, l_sigma = (
            stat_losses(taps_theta, taps_phi, cfg.stat_reduction) if cfg.rs else (zero, zero)
        )
        l_attn = attn_align_loss(taps_theta, taps_phi) if cfg.aa else zero
        try:
            if not math.isfinite(float(l_phi)):
                raise ValueError(f"L_DM_phi is not finite: {float(l_phi)}")
            total = total_loss(weighted, l_mu, l_sigma, l_attn, self.weights)
        except ValueError as exc:
            dump = self._dump_nonfinite(
                step, t, b, gamma, params, l_theta, l_phi, l_mu, l_sigma, l_attn
            )
            raise NonFiniteLossError(f"Step {step}: {exc}", dump) from exc

        # 9. update adapters and identifier embedding
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()

        # 10. indicator update with this step's losses
        loss_theta = float(l_theta.detach())
        loss_phi = float(l_phi)
        indicator = ema_update(state.indicator, b, loss_phi, loss_theta)
        state.indicator = indicator
        state.step = step

        # 11. report
        report = StepReport(
            step=step,
            t=t,
            bin=b,
            L_DM_theta=loss_theta,
            L_DM_phi=loss_phi,
            gamma=gamma,
            weight=weight,
            L_mu=float(l_mu.detach()),
            L_sigma=float(l_sigma.detach()),
            L_attn=float(l_attn.detach()),
            total=float(total.detach()),
            augment=params,
            gamma_snapshot=indicator.gamma,
            ema_phi=indicator.ema_phi[b],
            ema_theta=indicator.ema_theta[b],
            gamma_after=indicator.gamma[b],
        )
        logger.debug(
            "step %d t=%d bin=%d gamma=%.4f total=%.5f aug=%s",
            step, t, b, gamma, report.total, params.applied,
        )
        return report

    def _dump_nonfinite(self, step, t, b, gamma, params, *losses) -> Path | None:
        names = ("L_DM_theta", "L_DM_phi", "L_mu", "L_sigma", "L_attn")
        data = {
            "step": step,
            "t": t,
            "bin": b,
            "gamma": gamma,
            "augment": params.to_dict(),
            "losses": {n: repr(float(v.detach())) for n, v in zip(names, losses)},
            "indicator": self.state.indicator.to_dict(),
        }
        logger.error("Non-finite loss at step %d: %s", step, data["losses"])
        if self.dump_dir is None:
            return None
        path = Path(self.dump_dir) / f"nonfinite-step{step:06d}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2), encoding="utf-8")
        return path

    # -- snapshots ----------------------------------------------------------

    def checkpoint(self, extra: dict | None = None) -> Checkpoint:
        metadata = {
            "kind": "personalized",
            "step": self.state.step,
            "identifier": self.config.identifier,
            "class_word": self.class_word,
            "caption_templates": list(self.templates),
            "variant": self.config.variant_name,
            "seed": self.config.seed,
            "bins": self.config.bins,
            "prior_checksum": self.prior_checksum,
            "diffusion": self.prior.metadata.get("diffusion", {}),
            "corpus": self.prior.metadata.get("corpus", {}),
        }
        metadata.update(extra or {})
        return Checkpoint.from_model(self.net, self.vocab, metadata)

    def state_payload(self) -> dict:
        return {**self.state.to_payload(), "optimizer": self.optimizer.state_dict()}

    def restore(self, payload: dict, checkpoint: Checkpoint) -> None:
        """Load adapters, identifier embedding, optimizer and rng streams."""
        if checkpoint.step != int(payload["step"]):
            raise ValueError(
                f"Run state is at step {payload['step']} but checkpoint is at {checkpoint.step}"
            )
        self.net.load_state_dict(checkpoint.adapters, strict=False)
        with torch.no_grad():
            self.vocab.identifier_weight.copy_(checkpoint.identifier_weight)
        self.optimizer.load_state_dict(payload["optimizer"])
        self.state = RunState.from_payload(payload)

    def check_frozen_prior(self) -> None:
        if base_checksum(self.net, self.vocab) != self.prior_checksum:
            raise RuntimeError("Base weights changed during personalization")


def personalize_step(personalizer: Personalizer, batch: Batch) -> tuple[RunState, StepReport]:
    report = personalizer.personalize_step(batch)
    return personalizer.state, report


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------


@dataclass
class PersonalizationResult:
    checkpoint: Checkpoint
    run_dir: Path
    training_log: Path
    indicator_log: Path
    checkpoints: list[str]
    last_report: StepReport | None = None


def _load_prior(prior: Checkpoint | str | Path | None) -> Checkpoint:
    if prior is None:
        raise MissingPriorError("No prior checkpoint given; run 'pretrain' first")
    if isinstance(prior, Checkpoint):
        return prior
    path = Path(prior)
    if not path.is_file():
        raise MissingPriorError(f"Prior checkpoint not found: {path.name}")
    return load_checkpoint(path)


def _step_name(step: int) -> str:
    return f"step-{step:06d}"


def personalize(
    reference_set: list[CorpusItem],
    config: AptConfig,
    prior: Checkpoint | str | Path | None,
    run_dir: str | Path,
    *,
    resume: bool = False,
    metrics: RunMetrics | None = None,
) -> PersonalizationResult:
    """Run ``config.steps`` personalization steps, writing logs and checkpoints.

    With ``resume=True`` an interrupted run continues from its last saved
    state; logs are truncated to that step first so they match an unbroken
    run exactly.
    """
    prior_ckpt = _load_prior(prior)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    store = CheckpointStore(run_dir / CHECKPOINT_DIR)
    training_log = TrainingLog(run_dir / TRAINING_LOG_FILE)
    indicator_log = IndicatorLog(run_dir / INDICATOR_LOG_FILE)
    state_path = run_dir / RUN_STATE_FILE
    metrics = metrics or RunMetrics(run_dir.name)

    personalizer = Personalizer(prior_ckpt, reference_set, config, dump_dir=run_dir)
    saved_step: int | None = None

    if resume and state_path.exists():
        payload = torch.load(state_path, map_location="cpu", weights_only=True)
        start = int(payload["step"])
        if start > config.steps:
            raise ValueError(f"Saved run is at step {start}, beyond the requested {config.steps}")
        personalizer.restore(payload, store.load(_step_name(start)))
        training_log.truncate_after(start)
        indicator_log.truncate_after(start)
        saved_step = start
        logger.info("Resuming %s from step %d", run_dir.name, start)
    else:
        if resume:
            logger.warning("No saved state in %s; starting fresh", run_dir.name)
        for log in (training_log, indicator_log):
            log.path.unlink(missing_ok=True)
        for entry in store.list_checkpoints():
            store.delete(entry["name"])
        state_path.unlink(missing_ok=True)

    def save_point() -> None:
        step = personalizer.state.step
        store.save(_step_name(step), personalizer.checkpoint())
        torch.save(personalizer.state_payload(), state_path.with_suffix(".tmp"))
        state_path.with_suffix(".tmp").replace(state_path)
        logger.info("Checkpoint %s written", _step_name(step))

    logger.info(
        "Personalizing (%s): %d steps, %d reference image(s)",
        config.variant_name, config.steps, len(reference_set),
    )
    report: StepReport | None = None
    while personalizer.state.step < config.steps:
        batch = personalizer.sample_batch()
        with metrics.timer("personalize"):
            report = personalizer.personalize_step(batch)
        training_log.append(report.log_row())
        indicator_log.append(report.indicator_row())
        if report.augment.applied:
            metrics.increment("augmented_steps")
        if report.step % config.checkpoint_every == 0:
            save_point()
            saved_step = report.step

    if saved_step != personalizer.state.step:
        save_point()

    personalizer.check_frozen_prior()
    metrics.save(run_dir / METRICS_FILE)
    names = [entry["name"] for entry in store.list_checkpoints()]
    logger.info("Personalization finished at step %d", personalizer.state.step)
    return PersonalizationResult(
        checkpoint=store.load(_step_name(personalizer.state.step)),
        run_dir=run_dir,
        training_log=training_log.path,
        indicator_log=indicator_log.path,
        checkpoints=names,
        last_report=report,
    )
