#!/usr/bin/env python3
# End-to-end training at desk scale: synthesize a corpus, extract MFCCs,
# split 85/15, train the Bi-LSTM + attention-pooling regressor with
# MSE/Adam/cyclical LR, then score the validation split.
#
# Runs in well under a minute; scale n_clips/epochs up for a longer look.

from pathlib import Path

from moskit.dataset import split_all_corpora
from moskit.features import compute_mfcc, load_waveform
from moskit.metrics import render_table
from moskit.model import ModelConfig, load_checkpoint, predict_mos
from moskit.synth import SynthSpec, generate_corpus
from moskit.training import InMemoryFeatureSource, TrainConfig, evaluate, train

out_dir = Path("demo_output/train")

# --- corpus and features ------------------------------------------------------

spec = SynthSpec(n_clips=60, duration_s=1.0, snr_low_db=-5.0, snr_high_db=25.0, seed=3)
manifest = generate_corpus(spec, out_dir / "corpus")
features = InMemoryFeatureSource(
    {rec.id: compute_mfcc(load_waveform(rec.source)) for rec in manifest}
)
split = split_all_corpora(manifest, seed=7)
print(f"corpus: {len(manifest)} clips, split {len(split.train)}/{len(split.val)}")

# --- train --------------------------------------------------------------------

model_cfg = ModelConfig(input_channels=40)   # batch norm -> Bi-LSTM 2x32 -> AttPoolFF 64
train_cfg = TrainConfig(batch_size=16, epochs=12, seed=0)
report = train(manifest, split, features, model_cfg, train_cfg, out_dir / "run",
               log=lambda line: None)

for epoch, (tr, vl) in enumerate(zip(report.train_losses, report.val_losses)):
    marker = "  <- best" if epoch == report.best_epoch else ""
    print(f"epoch {epoch + 1:2d}  train {tr:.4f}  val {vl:.4f}{marker}")

# --- evaluate the selected checkpoint ------------------------------------------

reports = evaluate(report.checkpoint_path, manifest, split.val, features)
print("\nvalidation metrics (1-5 MOS scale):")
print(render_table(reports))

# --- score individual clips ----------------------------------------------------

ckpt = load_checkpoint(report.checkpoint_path)
print("\nsample predictions:")
for clip_id in sorted(split.val)[:5]:
    mos = predict_mos(ckpt.params, features.load(clip_id), ckpt.norm_stats)
    print(f"  {clip_id}: predicted {mos:.2f}, label {manifest[clip_id].mos_raw:.2f}")
