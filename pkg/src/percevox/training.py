"""Composite training objective, schedules, the fit loop, and checkpoints.

The total loss combines reconstruction, codebook, and commitment terms with
three perception-informed terms (quality-representation, phoneme-
representation, formant-track), each weighted and gated by a per-term enable
epoch.  Training uses Adam under a triangular cyclic learning rate, early
stopping on the mean quality-proxy score of validation reconstructions, and
bit-exact resumable checkpoints.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from . import dsp, formant, optim, perceploss, vqvae
from .container import load_container, save_container
from .errors import ConfigError, DataError


@dataclass
class LossWeights:
    """Term weights and enable epochs for the composite objective.

    The three perception-informed weights apply to the quality-
    representation loss, the phoneme-representation loss, and the formant-
    track loss; the formant weight is large because normalized tracks live
    in (0, 1), keeping all active terms within a comparable magnitude range.
    """

    lambda_recon: float = 1.0
    lambda_code: float = 1.0
    lambda_com: float = 3.0
    lambda_quality: float = 0.1
    lambda_phoneme: float = 0.1
    lambda_formant: float = 1e6
    enable_quality_epoch: int = 0
    enable_phoneme_epoch: int = 45
    enable_formant_epoch: int = 45

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")

    def vanilla(self):
        """Copy with every perception-informed weight zeroed."""
        return LossWeights(
            lambda_recon=self.lambda_recon,
            lambda_code=self.lambda_code,
            lambda_com=self.lambda_com,
            lambda_quality=0.0,
            lambda_phoneme=0.0,
            lambda_formant=0.0,
            enable_quality_epoch=self.enable_quality_epoch,
            enable_phoneme_epoch=self.enable_phoneme_epoch,
            enable_formant_epoch=self.enable_formant_epoch,
        )


@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 8
    lr_min: float = 5e-4
    lr_max: float = 2e-3
    cycle_length_steps: int = 0  # 0 = two epochs of steps, set at fit time
    early_stop_patience: int = 10
    seed: int = 0
    val_fraction: float = 0.1
    precision: str = "float64"

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ConfigError(f"lr_min {self.lr_min} > lr_max {self.lr_max}")
        if self.cycle_length_steps and self.cycle_length_steps < 2:
            raise ConfigError("cycle_length_steps must be >= 2 (or 0 for the default)")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class ExtractorSet:
    """The frozen feature extractors the perceptual terms evaluate."""

    quality: object = None
    phoneme: object = None


def cyclic_lr(step, config):
    """Triangular schedule between lr_min and lr_max with the configured
    full-cycle period in optimizer steps."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    cycle = config.cycle_length_steps
    if cycle < 2:
        raise ConfigError("cycle_length_steps not resolved; call fit or set it explicitly")
    return optim.triangular_lr(step, config.lr_min, config.lr_max, cycle / 2.0)


_TERM_NAMES = ("recon", "code", "com", "quality", "phoneme", "formant")


def total_loss(x, outputs, weights, extractors=None, regressor=None, epoch=0):
    """Weighted sum of the active loss terms plus a per-term breakdown.

    ``outputs`` is the (x_dec, z_list, q_list) triple from
    ``forward_reconstruct``.  A perceptual term is active when its weight is
    positive and ``epoch`` has reached its enable epoch; inactive terms are
    skipped entirely.  Returns (total, breakdown) where breakdown maps each
    active term name to {"raw", "weighted"} floats.
    """
    x_dec, z_list, q_list = outputs
    extractors = extractors or ExtractorSet()
    terms = {}
    if weights.lambda_recon > 0:
        terms["recon"] = (vqvae.reconstruction_loss(x, x_dec), weights.lambda_recon)
    if weights.lambda_code > 0 or weights.lambda_com > 0:
        code, com = vqvae.vq_losses(z_list, q_list)
        if weights.lambda_code > 0:
            terms["code"] = (code, weights.lambda_code)
        if weights.lambda_com > 0:
            terms["com"] = (com, weights.lambda_com)
    if weights.lambda_quality > 0 and epoch >= weights.enable_quality_epoch:
        if extractors.quality is None:
            raise ConfigError("quality loss enabled but no quality extractor supplied")
        terms["quality"] = (
            perceploss.representation_loss(extractors.quality, x, x_dec),
            weights.lambda_quality,
        )
    if weights.lambda_phoneme > 0 and epoch >= weights.enable_phoneme_epoch:
        if extractors.phoneme is None:
            raise ConfigError("phoneme loss enabled but no phoneme extractor supplied")
        terms["phoneme"] = (
            perceploss.representation_loss(extractors.phoneme, x, x_dec),
            weights.lambda_phoneme,
        )
    if weights.lambda_formant > 0 and epoch >= weights.enable_formant_epoch:
        if regressor is None:
            raise ConfigError("formant loss enabled but no formant regressor supplied")
        terms["formant"] = (formant.formant_loss(x, x_dec, regressor), weights.lambda_formant)

    breakdown = {}
    total = None
    for name in _TERM_NAMES:
        if name not in terms:
            continue
        term, lam = terms[name]
        raw = float(term.data)
        if not np.isfinite(raw):
            raise dc.NonFiniteError(f"loss term {name!r} is non-finite: {raw}")
        breakdown[name] = {"raw": raw, "weighted": lam * raw}
        weighted = term * lam
        total = weighted if total is None else total + weighted
    if total is None:
        total = dc.Tensor(np.zeros(()))
    return total, breakdown


@dataclass
class TrainState:
    """Everything beyond the parameters needed to resume bit-exactly."""

    epoch: int = 0
    step: int = 0
    best_val_quality: float = None
    epochs_since_improvement: int = 0
    rng: np.random.Generator = None
    optimizer: optim.Adam = None
    best_params: dict = None
    history: list = field(default_factory=list)


def split_dataset(clips, val_fraction, seed):
    """Deterministic shuffled split; the validation side gets at least one
    clip and the train side keeps the rest."""
    if not clips:
        raise DataError("empty dataset")
    order = np.random.default_rng(seed).permutation(len(clips))
    n_val = max(1, int(round(len(clips) * val_fraction)))
    if n_val >= len(clips):
        raise DataError(f"dataset of {len(clips)} clips cannot spare {n_val} for validation")
    val = [clips[i] for i in order[:n_val]]
    train = [clips[i] for i in order[n_val:]]
    return train, val


def _clip_frames(clip, model):
    mel, speaker_id = clip
    frames = mel.frames if isinstance(mel, dsp.MelSpectrogram) else np.asarray(mel, dtype=np.float64)
    return vqvae.trim_to_multiple(frames, model.config.total_downsample), speaker_id


def validation_quality_scores(model, val_clips, quality_extractor):
    """Per-clip quality-proxy scores of validation reconstructions."""
    scores = []
    for clip in val_clips:
        frames, speaker_id = _clip_frames(clip, model)
        x_dec, _, _ = model.forward_reconstruct(dc.Tensor(frames), speaker_id)
        scores.append(perceploss.quality_score(quality_extractor, dsp.MelSpectrogram(x_dec.data)))
    return scores


def validation_quality(model, val_clips, quality_extractor):
    """Mean quality-proxy score over validation reconstructions."""
    return float(np.mean(validation_quality_scores(model, val_clips, quality_extractor)))


def fit(model, clips, config, weights, extractors=None, regressor=None,
        resume_state=None, checkpoint_path=None):
    """Train the model; returns (model, history, state).

    Each epoch runs seeded shuffled mini-batches, then scores validation
    reconstructions with the quality proxy (when one is supplied): the
    best-scoring parameter snapshot is retained and training stops after
    ``early_stop_patience`` epochs without improvement.  On return the
    model carries the best snapshot if early stopping was active, else the
    final parameters.

    When ``checkpoint_path`` is set, the full state is saved after every
    epoch — with the parameters as they stand, before any best-snapshot
    restoration — so a run resumed from the file via ``load_checkpoint``
    and ``resume_state`` reproduces the uninterrupted run bit-exactly.
    """
    if not clips:
        raise DataError("empty dataset")
    train_clips, val_clips = split_dataset(clips, config.val_fraction, config.seed)
    if config.cycle_length_steps < 2:
        steps_per_epoch = max(1, int(np.ceil(len(train_clips) / config.batch_size)))
        config.cycle_length_steps = max(2, 2 * steps_per_epoch)

    params = model.parameters()
    if config.precision == "float32":
        for p in params:
            p.data = p.data.astype(np.float32)

    if resume_state is None:
        state = TrainState(rng=np.random.default_rng(config.seed), optimizer=optim.Adam(params))
    else:
        state = resume_state
        if state.optimizer is None:
            state.optimizer = optim.Adam(params)
        else:
            state.optimizer.params = params

    use_early_stop = extractors is not None and extractors.quality is not None
    while state.epoch < config.max_epochs:
        if use_early_stop and state.epochs_since_improvement >= config.early_stop_patience:
            break
        epoch = state.epoch
        order = state.rng.permutation(len(train_clips))
        epoch_sums, n_batches = {}, 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_clips[i] for i in order[start:start + config.batch_size]]
            total = None
            merged = {}
            for clip in batch:
                frames, speaker_id = _clip_frames(clip, model)
                if config.precision == "float32":
                    frames = frames.astype(np.float32)
                x = dc.Tensor(frames)
                outputs = model.forward_reconstruct(x, speaker_id)
                clip_loss, breakdown = total_loss(
                    x, outputs, weights, extractors, regressor, epoch
                )
                total = clip_loss if total is None else total + clip_loss
                for name, vals in breakdown.items():
                    slot = merged.setdefault(name, {"raw": 0.0, "weighted": 0.0})
                    slot["raw"] += vals["raw"] / len(batch)
                    slot["weighted"] += vals["weighted"] / len(batch)
            batch_loss = total * (1.0 / len(batch))
            state.optimizer.zero_grad()
            batch_loss.backward()
            state.optimizer.step(lr=cyclic_lr(state.step, config))
            state.step += 1
            n_batches += 1
            for name, vals in merged.items():
                slot = epoch_sums.setdefault(name, {"raw": 0.0, "weighted": 0.0})
                slot["raw"] += vals["raw"]
                slot["weighted"] += vals["weighted"]

        record = {
            "epoch": epoch,
            "losses": {
                name: {k: v / n_batches for k, v in vals.items()}
                for name, vals in epoch_sums.items()
            },
        }
        state.epoch += 1
        if use_early_stop:
            score = validation_quality(model, val_clips, extractors.quality)
            record["val_quality"] = score
            if state.best_val_quality is None or score > state.best_val_quality:
                state.best_val_quality = score
                state.epochs_since_improvement = 0
                state.best_params = model.parameter_arrays()
            else:
                state.epochs_since_improvement += 1
        state.history.append(record)
        if checkpoint_path is not None:
            save_checkpoint(model, state, checkpoint_path, config, weights)
        if use_early_stop and state.epochs_since_improvement >= config.early_stop_patience:
            break

    if use_early_stop and state.best_params is not None:
        model.load_parameter_arrays(state.best_params)
    return model, state.history, state


# --- checkpoints ---------------------------------------------------------------

CHECKPOINT_KIND = "vqvae-checkpoint"


def save_checkpoint(model, state, path, config=None, weights=None):
    """Persist parameters, optimizer moments, counters, history, and the
    exact random-generator state; reloading resumes training bit-exactly."""
    arrays = {}
    for name, data in model.parameter_arrays().items():
        arrays[f"param.{name}"] = data
    if state.optimizer is not None:
        arrays.update(state.optimizer.state_arrays())
    if state.best_params is not None:
        for name, data in state.best_params.items():
            arrays[f"best.{name}"] = data
    cfg = model.config
    meta = {
        "kind": CHECKPOINT_KIND,
        "model": {
            "mel_bands": cfg.mel_bands,
            "latent_dim": cfg.latent_dim,
            "codebook_size": cfg.codebook_size,
            "hidden_channels": cfg.hidden_channels,
            "speaker_dim": cfg.speaker_dim,
            "level_stride": cfg.level_stride,
        },
        "speaker_ids": list(model.speakers.speaker_ids),
        "epoch": state.epoch,
        "step": state.step,
        "best_val_quality": state.best_val_quality,
        "epochs_since_improvement": state.epochs_since_improvement,
        "rng_state": state.rng.bit_generator.state if state.rng is not None else None,
        "history": state.history,
        "train_config": asdict(config) if config is not None else None,
        "loss_weights": asdict(weights) if weights is not None else None,
    }
    save_container(path, arrays, meta)


def load_checkpoint(path):
    """Rebuild (model, state, train_config, loss_weights) from a checkpoint."""
    arrays, meta = load_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise DataError(f"not a training checkpoint: {path}")
    cfg = vqvae.VqvaeConfig(**meta["model"])
    model = vqvae.HierarchicalVqvae(cfg, speaker_ids=meta["speaker_ids"], seed=0)
    model.load_parameter_arrays(
        {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    )
    state = TrainState(
        epoch=meta["epoch"],
        step=meta["step"],
        best_val_quality=meta["best_val_quality"],
        epochs_since_improvement=meta["epochs_since_improvement"],
    )
    if meta["rng_state"] is not None:
        state.rng = np.random.default_rng(0)
        state.rng.bit_generator.state = meta["rng_state"]
    state.history = meta["history"]
    best = {k[len("best."):]: v for k, v in arrays.items() if k.startswith("best.")}
    state.best_params = best or None
    state.optimizer = optim.Adam(model.parameters())
    if "adam.t" in arrays:
        state.optimizer.load_state_arrays(arrays)
    train_config = TrainConfig(**meta["train_config"]) if meta["train_config"] else None
    weights = LossWeights(**meta["loss_weights"]) if meta["loss_weights"] else None
    return model, state, train_config, weights
