"""Finite-difference audit of every differentiable operation and loss.

The quantizer makes the real training objective non-differentiable, so this
module also provides the frozen surrogate used to validate the
straight-through pipeline: pin every non-smooth ingredient at a baseline
input and finite-difference the smooth stand-in whose true gradient equals
the straight-through gradient of the real model.
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import formant, perceploss, training, vqvae

TOLERANCE = 1e-4


def _frozen_parts(model, x0, speaker_id):
    """Freeze the quantizer decisions of ``model`` at input x0.

    Returns (core_loss_fn, indices) where core_loss_fn maps an input Tensor
    to the tuple (recon, codebook, commitment, x_dec) with every
    non-differentiable ingredient pinned: the quantization indices, the
    residuals (q - z) carried through the straight-through estimator, and
    the operand under each stop-gradient (reconstruction target, encoder
    output inside the codebook loss, code inside the commitment loss).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    z_list = model.encode(dc.Tensor(x0))
    _, q_raw, indices = model.quantize(z_list)
    residuals = [q.data - z.data for z, q in zip(z_list, q_raw)]
    z_frozen = [z.data.copy() for z in z_list]
    q_frozen = [q.data.copy() for q in q_raw]

    def core_loss(t):
        zs = model.encode(t)
        q_st = [z + dc.Tensor(r) for z, r in zip(zs, residuals)]
        x_dec = model.decode(q_st, speaker_id)
        rec = vqvae.reconstruction_loss(dc.Tensor(x0), x_dec)
        # codebook term: live codes against the frozen encoder output
        q_live = [
            dc.embedding_lookup(quant.codebook, idx)
            for quant, idx in zip(model.quantizers, indices)
        ]
        cb, _ = vqvae.vq_losses([dc.Tensor(z) for z in z_frozen], q_live)
        # commitment term: live encoder output against the frozen codes
        _, com = vqvae.vq_losses(zs, [dc.Tensor(q) for q in q_frozen])
        return rec, cb, com, x_dec

    return core_loss, indices


def frozen_quantization_surrogate(model, x0, speaker_id):
    """Differentiable stand-in for the VQVAE training objective at x0.

    The returned loss_fn maps an input Tensor to the unweighted
    (recon + codebook + commitment) scalar; its true derivative at x0
    coincides with the straight-through reverse-mode gradient of the real
    pipeline, so finite differences of it are comparable with backward()
    of the real model.  Returns (loss_fn, baseline_indices).
    """
    core_loss, indices = _frozen_parts(model, x0, speaker_id)

    def loss_fn(t):
        rec, cb, com, _ = core_loss(t)
        return rec + cb + com

    return loss_fn, indices


def quantization_margins(model, x0):
    """Smallest best-vs-second-best distance gap per level at input x0."""
    z_list = model.encode(dc.Tensor(np.asarray(x0)))
    gaps = []
    for quant, z in zip(model.quantizers, z_list):
        d = np.sort(quant.distances(z.data), axis=1)
        gaps.append(float(np.min(d[:, 1] - d[:, 0])))
    return gaps


# --- the named check suite --------------------------------------------------------


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def ok(self):
        return self.max_rel_error < self.tolerance

    def __str__(self):
        flag = "ok  " if self.ok else "FAIL"
        return f"{flag} {self.name:<38s} max_rel_error={self.max_rel_error:.3e}"


def _away_from_kinks(rng, shape, low=0.2, high=1.0):
    """Values bounded away from zero so leaky_relu stays locally linear."""
    mags = rng.uniform(low, high, shape)
    signs = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return mags * signs


def _op_checks(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    m = rng.standard_normal((4, 5))
    checks = [
        ("add", lambda t: dc.mean(t + dc.Tensor(b)), dc.Tensor(a.copy(), requires_grad=True)),
        ("subtract", lambda t: dc.mean(dc.Tensor(b) - t), dc.Tensor(a.copy(), requires_grad=True)),
        ("multiply", lambda t: dc.mean(t * dc.Tensor(b)), dc.Tensor(a.copy(), requires_grad=True)),
        ("multiply-broadcast", lambda t: dc.mean(t * dc.Tensor(b[0])), dc.Tensor(a.copy(), requires_grad=True)),
        ("matmul-left", lambda t: dc.mean(t @ dc.Tensor(m)), dc.Tensor(a.copy(), requires_grad=True)),
        ("matmul-right", lambda t: dc.mean(dc.Tensor(a) @ t), dc.Tensor(m.copy(), requires_grad=True)),
        ("square", lambda t: dc.mean(dc.square(t)), dc.Tensor(a.copy(), requires_grad=True)),
        ("leaky_relu", lambda t: dc.mean(dc.leaky_relu(t) * dc.Tensor(b)),
         dc.Tensor(_away_from_kinks(rng, (3, 4)), requires_grad=True)),
        ("tanh", lambda t: dc.mean(dc.tanh(t) * dc.Tensor(b)), dc.Tensor(a.copy(), requires_grad=True)),
        ("sigmoid", lambda t: dc.mean(dc.sigmoid(t) * dc.Tensor(b)), dc.Tensor(a.copy(), requires_grad=True)),
        ("reshape", lambda t: dc.mean(dc.square(dc.reshape(t, (2, 6)))), dc.Tensor(a.copy(), requires_grad=True)),
        ("concat", lambda t: dc.mean(dc.square(dc.concat([t, dc.Tensor(b)], axis=0))),
         dc.Tensor(a.copy(), requires_grad=True)),
        ("slice_time", lambda t: dc.mean(dc.square(dc.slice_time(t, 1, 3))),
         dc.Tensor(a.copy(), requires_grad=True)),
        ("sum", lambda t: dc.mean(dc.square(dc.sum_(t, axis=0))), dc.Tensor(a.copy(), requires_grad=True)),
        ("mean-axis", lambda t: dc.sum_(dc.square(dc.mean(t, axis=1))), dc.Tensor(a.copy(), requires_grad=True)),
        ("embedding_lookup", lambda t: dc.mean(dc.square(dc.embedding_lookup(t, np.array([0, 2, 1, 2])))),
         dc.Tensor(rng.standard_normal((3, 4)), requires_grad=True)),
    ]
    row_weight = rng.standard_normal((7, 4))
    checks.append(
        ("broadcast_time", lambda t: dc.mean(dc.square(dc.broadcast_time(t, 7) * dc.Tensor(row_weight))),
         dc.Tensor(rng.standard_normal((1, 4)), requires_grad=True)))
    x6 = rng.standard_normal((6, 3))
    x4 = rng.standard_normal((4, 3))
    w_conv = rng.standard_normal((3, 3, 2)) * 0.4  # (K, C_in, C_out)
    checks += [
        ("conv1d-input", lambda t: dc.mean(dc.square(dc.conv1d(t, dc.Tensor(w_conv), stride=1, padding=1))),
         dc.Tensor(x6.copy(), requires_grad=True)),
        ("conv1d-weight", lambda t: dc.mean(dc.square(dc.conv1d(dc.Tensor(x6), t, stride=1, padding=1))),
         dc.Tensor(w_conv.copy(), requires_grad=True)),
        ("conv1d-strided", lambda t: dc.mean(dc.square(dc.conv1d(t, dc.Tensor(w_conv), stride=2, padding=1))),
         dc.Tensor(x6.copy(), requires_grad=True)),
        ("transposed_conv1d-input",
         lambda t: dc.mean(dc.square(dc.transposed_conv1d(t, dc.Tensor(w_conv), stride=2, padding=1))),
         dc.Tensor(x4.copy(), requires_grad=True)),
        ("transposed_conv1d-weight",
         lambda t: dc.mean(dc.square(dc.transposed_conv1d(dc.Tensor(x4), t, stride=2, padding=1))),
         dc.Tensor(w_conv.copy(), requires_grad=True)),
    ]
    return checks


def _loss_checks(rng):
    x0 = rng.uniform(-12.0, -2.0, (8, 6))
    xd = x0 + 0.3 * rng.standard_normal(x0.shape)
    quality = perceploss.QualityProxyExtractor(mel_bands=6, channels=5, seed=5)
    phoneme = perceploss.PhonemeProxyExtractor(mel_bands=6, channels=5, seed=6)
    reg = formant.FormantRegressor(mel_bands=6, half_context=1, hidden=8, hidden2=6, seed=7)
    z0 = rng.standard_normal((5, 4))
    q0 = z0 + 0.2 * rng.standard_normal(z0.shape)
    checks = [
        ("loss/reconstruction",
         lambda t: vqvae.reconstruction_loss(dc.Tensor(x0), t),
         dc.Tensor(xd.copy(), requires_grad=True)),
        ("loss/codebook",
         lambda t: vqvae.vq_losses([dc.Tensor(z0)], [t])[0],
         dc.Tensor(q0.copy(), requires_grad=True)),
        ("loss/commitment",
         lambda t: vqvae.vq_losses([t], [dc.Tensor(q0)])[1],
         dc.Tensor(z0.copy(), requires_grad=True)),
        ("loss/quality-representation",
         lambda t: perceploss.representation_loss(quality, dc.Tensor(x0), t),
         dc.Tensor(xd.copy(), requires_grad=True)),
        ("loss/phoneme-representation",
         lambda t: perceploss.representation_loss(phoneme, dc.Tensor(x0), t),
         dc.Tensor(xd.copy(), requires_grad=True)),
        ("loss/formant-track",
         lambda t: formant.formant_loss(dc.Tensor(x0), t, reg),
         dc.Tensor(xd.copy(), requires_grad=True)),
    ]

    model = vqvae.HierarchicalVqvae(
        vqvae.VqvaeConfig(mel_bands=6, latent_dim=4, codebook_size=8,
                          hidden_channels=8, speaker_dim=4),
        speaker_ids=["s0", "s1"], seed=3)
    xm = rng.uniform(-12.0, -2.0, (8, 6))
    surrogate, _ = frozen_quantization_surrogate(model, xm, "s0")
    checks.append(("loss/vqvae-straight-through", surrogate,
                   dc.Tensor(xm.copy(), requires_grad=True)))

    core_loss, _ = _frozen_parts(model, xm, "s0")
    w = training.LossWeights()

    def total_objective(t):
        rec, cb, com, x_dec = core_loss(t)
        total = w.lambda_recon * rec + w.lambda_code * cb + w.lambda_com * com
        total = total + w.lambda_quality * perceploss.representation_loss(quality, dc.Tensor(xm), x_dec)
        total = total + w.lambda_phoneme * perceploss.representation_loss(phoneme, dc.Tensor(xm), x_dec)
        total = total + w.lambda_formant * formant.formant_loss(dc.Tensor(xm), x_dec, reg)
        return total

    checks.append(("loss/total-objective", total_objective,
                   dc.Tensor(xm.copy(), requires_grad=True)))
    return checks


def run_gradient_suite(seed=0, tolerance=TOLERANCE):
    """Finite-difference every operation and loss; list of SuiteResult."""
    rng = np.random.default_rng(seed)
    results = []
    for name, f, t in _op_checks(rng) + _loss_checks(rng):
        outcome = dc.finite_difference_check(f, t)
        results.append(SuiteResult(name, outcome.max_rel_error, tolerance))
    return results


def format_suite(results):
    lines = [str(r) for r in results]
    worst = max(results, key=lambda r: r.max_rel_error)
    n_bad = sum(not r.ok for r in results)
    lines.append(f"checks={len(results)} failures={n_bad} "
                 f"worst={worst.name} ({worst.max_rel_error:.3e})")
    return "\n".join(lines)
