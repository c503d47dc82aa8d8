"""Train a small model for a few epochs, then answer with and without saliency masking.

Pass 1 answers the question on the registered pair.  The keyword of that
answer becomes a Grad-CAM target; the fused map masks both images and pass 2
answers again.  Heatmaps are written as PGM files under ``demo_out/``.

    python demos/02_two_pass_inference.py
"""

from pathlib import Path

import numpy as np

from diffvqa.pipeline import Predictor, TrainConfig, make_batch, run_training
from diffvqa.synthdata import Sample, SynthConfig, generate_pair, write_pgm

SIZE = 32
OUT = Path("demo_out")


def samples(seed, start, n):
    cfg = SynthConfig(image_size=SIZE)
    out = []
    for i in range(start, start + n):
        p = generate_pair(seed, i, cfg)
        out.append(Sample(p.id, p.main, p.ref, p.question, p.answer, p.keyword, p.change,
                          p.theta_star, p.gt_mask))
    return out


train, valid = samples(0, 0, 96), samples(0, 96, 16)
cfg = TrainConfig(epochs=4, warmup_epochs=1, batch_size=16, lr=3e-3, ckpt_dir=str(OUT / "runs"),
                  model=dict(image_size=SIZE, enc_channels=(8, 16, 16, 32), d_model=32))
run = run_training(cfg, train, valid)
for rec in run.log:
    print(f"epoch {rec['epoch']} {rec['phase']:6s} L_LM {rec['l_lm']:.3f} "
          f"val combined {rec['val']['combined']:.3f}")

predictor = Predictor(run.trainer.model, run.trainer.vocab)
batch = make_batch(valid[:4], predictor.vocab)
result = predictor.two_pass(batch.main, batch.ref, batch.questions)
for i, s in enumerate(valid[:4]):
    print(f"\nQ: {s.question}\n  truth:   {s.answer}")
    print(f"  pass 1:  {predictor.vocab.decode(result.preliminary[i])}")
    print(f"  keyword: {result.keywords[i]}")
    print(f"  pass 2:  {predictor.vocab.decode(result.final[i])}")
    if result.masks[i] is not None:
        OUT.mkdir(exist_ok=True)
        write_pgm(OUT / f"{s.id}_mask.pgm", result.masks[i].values)
        write_pgm(OUT / f"{s.id}_truth.pgm", s.mask.astype(float))
        peak = tuple(int(v) for v in np.unravel_index(np.argmax(result.masks[i].values), (SIZE, SIZE)))
        print(f"  saliency peak at {peak}, lesion mask covers it: {bool(s.mask[peak])}")
