#!/usr/bin/env python3
"""Overfit the model on a tiny synthetic corpus and print the loss curve.

Quick sanity check that the optimizer, quantizer, and decoder cooperate on a
fresh machine: reconstruction loss on 8 clips should fall by well over an
order of magnitude within 200 epochs (a couple of minutes on one core).
"""
import argparse
import tempfile
from pathlib import Path

from percevox import speechcorpus, training, vqvae


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--clips", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="corpus directory (default: a temp dir)")
    args = ap.parse_args()

    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="overfit_"))
    _, rows, _ = speechcorpus.build_speech_corpus(
        out, n_speakers=4, utterances_per_speaker=2, seed=args.seed)
    clips = speechcorpus.corpus_clips(rows)[: args.clips]
    print(f"corpus: {len(clips)} clips, {len({s for _, s in clips})} speakers ({out})")

    model = vqvae.HierarchicalVqvae(
        vqvae.VqvaeConfig(), speaker_ids=sorted({s for _, s in clips}), seed=args.seed)
    config = training.TrainConfig(max_epochs=args.epochs, batch_size=8, seed=args.seed)
    _, history, _ = training.fit(model, clips, config, training.LossWeights().vanilla())

    stride = max(1, args.epochs // 20)
    for record in history[::stride] + ([history[-1]] if (len(history) - 1) % stride else []):
        losses = record["losses"]
        print(f"epoch {record['epoch']:4d}  recon {losses['recon']['raw']:10.4f}  "
              f"code {losses['code']['raw']:8.4f}  com {losses['com']['raw']:8.4f}")
    first = history[0]["losses"]["recon"]["raw"]
    last = history[-1]["losses"]["recon"]["raw"]
    print(f"recon ratio: {last / first:.4f} (epoch {len(history)} vs epoch 1)")


if __name__ == "__main__":
    main()
