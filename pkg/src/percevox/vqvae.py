"""Hierarchical vector-quantized autoencoder with a learnable speaker
codebook.

Three encoder levels downsample a log-mel input (N, 80) by cumulative
factors (2, 4, 8); each level's latents are quantized to their own
codebook with straight-through gradients; the decoder consumes all
quantized levels plus the speaker embedding (broadcast-concatenated at
every level) and reproduces an (N, 80) spectrogram. Voice conversion is
decoding with a different speaker's embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import dsp
from .errors import DataError


@dataclass
class VqvaeConfig:
    mel_bands: int = 80
    latent_dim: int = 64  # D: channel width of z and the code vectors
    codebook_size: int = 128  # M: codes per quantizer level
    hidden_channels: int = 96
    speaker_dim: int = 32
    n_levels: int = 3
    level_stride: int = 2  # per-level downsampling; cumulative factors 2, 4, 8

    def __post_init__(self):
        if self.n_levels != 3:
            raise DataError(f"architecture is fixed at 3 levels, got {self.n_levels}")
        if self.codebook_size < 2:
            raise DataError(f"codebook_size must be >= 2, got {self.codebook_size}")

    @property
    def total_downsample(self):
        return self.level_stride**self.n_levels


class VectorQuantizer:
    """One codebook level: M learnable D-dimensional code vectors."""

    def __init__(self, codebook_size, dim, level_index, rng):
        data = rng.uniform(-1.0, 1.0, (codebook_size, dim)) / np.sqrt(dim)
        if len(np.unique(data, axis=0)) != codebook_size:
            raise DataError(f"duplicate code vectors after initialization at level {level_index}")
        self.codebook = dc.Parameter(data, f"vq{level_index}.codebook")
        self.level_index = level_index

    def distances(self, z_data):
        # squared Euclidean distance per (time step, code), same arithmetic
        # as a per-pair brute-force scan
        diff = z_data[:, None, :] - self.codebook.data[None, :, :]
        return np.sum(diff * diff, axis=2)


def nearest_code(q, z_vec):
    """Index of the nearest code vector (squared Euclidean distance;
    ties break toward the lowest index)."""
    z_vec = np.asarray(z_vec, dtype=np.float64)
    diff = q.codebook.data - z_vec[None, :]
    return int(np.argmin(np.sum(diff * diff, axis=1)))


def quantize_st(q, z):
    """Quantize a latent sequence (T, D): returns (q_st, q_raw, indices).

    q_st forward-equals q_raw bitwise and passes gradients straight
    through to z; q_raw is differentiable into the codebook.
    """
    if z.shape[1] != q.codebook.data.shape[1]:
        raise DataError(f"latent dim {z.shape[1]} != codebook dim {q.codebook.data.shape[1]}")
    indices = np.argmin(q.distances(z.data), axis=1)
    q_raw = dc.embedding_lookup(q.codebook, indices)
    q_st = dc.straight_through(z, q_raw)
    return q_st, q_raw, indices


class SpeakerCodebook:
    """Learnable per-speaker embeddings, swapped at conversion time."""

    def __init__(self, speaker_ids, dim, rng):
        ids = list(speaker_ids)
        if len(set(ids)) != len(ids):
            raise DataError("speaker ids must be unique")
        if not ids:
            raise DataError("speaker codebook needs at least one speaker")
        self.speaker_ids = ids
        self.embeddings = dc.Parameter(
            rng.uniform(-1.0, 1.0, (len(ids), dim)) / np.sqrt(dim), "spk.embeddings"
        )

    def index_of(self, speaker_id):
        try:
            return self.speaker_ids.index(speaker_id)
        except ValueError:
            raise DataError(f"unknown speaker id {speaker_id!r}") from None

    def embed(self, speaker_id):
        return dc.embedding_lookup(self.embeddings, np.array([self.index_of(speaker_id)]))


def _conv_params(rng, kernel, c_in, c_out, name):
    lim = np.sqrt(6.0 / (kernel * c_in + c_out))
    w = dc.Parameter(rng.uniform(-lim, lim, (kernel, c_in, c_out)), f"{name}.w")
    b = dc.Parameter(np.zeros((1, c_out)), f"{name}.b")
    return w, b


class HierarchicalVqvae:
    def __init__(self, config=None, speaker_ids=("spk0",), seed=0):
        self.config = config or VqvaeConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        s, h, d = cfg.level_stride, cfg.hidden_channels, cfg.latent_dim

        self.encoder = []
        c_in = cfg.mel_bands
        for lvl in range(1, cfg.n_levels + 1):
            down = _conv_params(rng, 2 * s, c_in, h, f"enc{lvl}.down")
            mix = _conv_params(rng, 3, h, d, f"enc{lvl}.mix")
            self.encoder.append((down, mix))
            c_in = d

        self.quantizers = [
            VectorQuantizer(cfg.codebook_size, d, lvl, rng) for lvl in range(1, cfg.n_levels + 1)
        ]
        self.speakers = SpeakerCodebook(speaker_ids, cfg.speaker_dim, rng)

        self.decoder = []
        for lvl in range(cfg.n_levels, 0, -1):
            carry = 0 if lvl == cfg.n_levels else h
            mix = _conv_params(rng, 3, carry + d + cfg.speaker_dim, h, f"dec{lvl}.mix")
            up = _conv_params(rng, 2 * s, h, h, f"dec{lvl}.up")
            self.decoder.append((mix, up))
        self.out_w, self.out_b = _conv_params(rng, 3, h, cfg.mel_bands, "out")

    def parameters(self):
        params = []
        for (dw, db), (mw, mb) in self.encoder:
            params += [dw, db, mw, mb]
        for q in self.quantizers:
            params.append(q.codebook)
        params.append(self.speakers.embeddings)
        for (mw, mb), (uw, ub) in self.decoder:
            params += [mw, mb, uw, ub]
        params += [self.out_w, self.out_b]
        dc.check_unique_names(params)
        return params

    def parameter_arrays(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_parameter_arrays(self, arrays):
        for p in self.parameters():
            p.data = arrays[p.name].astype(p.data.dtype).copy()

    # --- model passes -----------------------------------------------------

    def encode(self, x):
        """x: (N, mel_bands) Tensor or MelSpectrogram -> [z_1, z_2, z_3].

        Each level halves the frame count (odd lengths floor); with N a
        multiple of the total factor the lengths are N/2, N/4, N/8.
        """
        h = x if isinstance(x, dc.Tensor) else dc.Tensor(np.asarray(x.frames))
        if h.shape[1] != self.config.mel_bands:
            raise DataError(f"expected {self.config.mel_bands} mel bands, got {h.shape[1]}")
        s = self.config.level_stride
        zs = []
        for (dw, db), (mw, mb) in self.encoder:
            h = dc.leaky_relu(dc.conv1d(h, dw, stride=s, padding=s // 2) + db)
            h = dc.conv1d(h, mw, stride=1, padding=1) + mb
            zs.append(h)
        return zs

    def quantize(self, z_list):
        triples = [quantize_st(q, z) for q, z in zip(self.quantizers, z_list)]
        q_st = [t[0] for t in triples]
        q_raw = [t[1] for t in triples]
        indices = [t[2] for t in triples]
        return q_st, q_raw, indices

    def decode(self, q_st_levels, speaker_id):
        """Quantized levels (finest first) + speaker id -> (N, 80) Tensor."""
        s = self.config.level_stride
        e = self.speakers.embed(speaker_id)
        carry = None
        for (mix, up), q_st in zip(self.decoder, reversed(q_st_levels)):
            t = q_st.shape[0]
            pieces = ([carry] if carry is not None else []) + [q_st, dc.broadcast_time(e, t)]
            h = dc.concat(pieces, axis=1)
            h = dc.leaky_relu(dc.conv1d(h, mix[0], stride=1, padding=1) + mix[1])
            carry = dc.leaky_relu(dc.transposed_conv1d(h, up[0], stride=s, padding=s // 2) + up[1])
        return dc.conv1d(carry, self.out_w, stride=1, padding=1) + self.out_b

    def forward_reconstruct(self, x, speaker_id):
        """encode -> quantize -> decode; returns (x_dec, z_list, q_list).

        The input frame count must be a multiple of the total downsampling
        factor so the decoder output shape equals the input shape.
        """
        t = x if isinstance(x, dc.Tensor) else dc.Tensor(np.asarray(x.frames))
        factor = self.config.total_downsample
        if t.shape[0] % factor != 0:
            raise DataError(
                f"frame count {t.shape[0]} not divisible by {factor}; trim or pad upstream"
            )
        z_list = self.encode(t)
        q_st, q_raw, _ = self.quantize(z_list)
        x_dec = self.decode(q_st, speaker_id)
        return x_dec, z_list, q_raw

    def convert_speaker(self, mel, target_speaker):
        """Reconstruct mel content with the target speaker's embedding.

        Accepts any frame count: the input is edge-padded to a multiple of
        the downsampling factor and the output cropped back, so the shape
        is preserved.
        """
        frames = np.asarray(mel.frames, dtype=np.float64)
        n = frames.shape[0]
        factor = self.config.total_downsample
        if n < 1:
            raise DataError("cannot convert an empty spectrogram")
        pad = (-n) % factor
        if pad:
            frames = np.pad(frames, ((0, pad), (0, 0)), mode="edge")
        x_dec, _, _ = self.forward_reconstruct(dc.Tensor(frames), target_speaker)
        out = x_dec.data[:n]
        cfg = mel.config if isinstance(mel, dsp.MelSpectrogram) else dsp.SpectrogramConfig()
        return dsp.MelSpectrogram(out, cfg)


def trim_to_multiple(frames, factor):
    """Trim trailing frames so the count is the largest multiple of factor."""
    n = (frames.shape[0] // factor) * factor
    if n == 0:
        raise DataError(f"fewer than {factor} frames; nothing left after trimming")
    return frames[:n]


# --- losses ------------------------------------------------------------------


def reconstruction_loss(x, x_dec):
    """Mean squared error over all spectrogram entries."""
    x_t = x if isinstance(x, dc.Tensor) else dc.Tensor(np.asarray(x.frames))
    if x_t.shape != x_dec.shape:
        raise DataError(f"shape mismatch: {x_t.shape} vs {x_dec.shape}")
    return dc.mean(dc.square(x_dec - dc.stop_gradient(x_t)))


def vq_losses(z_list, q_list):
    """(codebook_loss, commitment_loss), each summed over levels with a
    per-level element mean.

    codebook: ||sg[z] - q||^2 pulls codes toward the (frozen) encodings;
    commitment: ||z - sg[q]||^2 pulls encodings toward their codes.
    """
    if len(z_list) != len(q_list):
        raise DataError(f"level count mismatch: {len(z_list)} vs {len(q_list)}")
    codebook_loss = None
    commitment_loss = None
    for z, q in zip(z_list, q_list):
        if z.shape != q.shape:
            raise DataError(f"latent shape mismatch: {z.shape} vs {q.shape}")
        cb = dc.mean(dc.square(dc.stop_gradient(z) - q))
        cm = dc.mean(dc.square(z - dc.stop_gradient(q)))
        codebook_loss = cb if codebook_loss is None else codebook_loss + cb
        commitment_loss = cm if commitment_loss is None else commitment_loss + cm
    return codebook_loss, commitment_loss
