"""
Pre-train, then fine-tune a recognizer
======================================

One seed pair of the desk-scale experiment: fine-tune from random weights and
from MPC snapshots taken at 25%, 50% and 100% of pre-training, then compare
validation curves and test CER.  Pass ``--quick`` for a smaller run.
"""

import argparse
import logging

from mpc_speech.experiments import DeskSetup, build_data, run_seed_pair

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--quick", action="store_true")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

setup = DeskSetup()
if args.quick:
    setup = DeskSetup(corpus_size=600, num_labelled=80, num_valid=60, num_test=60,
                      pretrain_steps=300, finetune_epochs=6, beam=3)
data = build_data(setup)
print(f"{len(data.pool)} unlabelled, {len(data.train)} labelled, "
      f"{len(data.valid)} validation, {len(data.test)} test utterances")

result = run_seed_pair(args.seed, data, setup)

# validation loss per epoch, random init first
print("random ", " ".join(f"{v:5.2f}" for v in result.random_val))
for fraction, curve in sorted(result.pretrained_val.items()):
    print(f"mpc {int(fraction * 100):3d}%", " ".join(f"{v:5.2f}" for v in curve))
print(f"test CER: random {result.random_cer:.3f}, mpc {result.pretrained_cer[1.0]:.3f}")
print("epochs to reach random's final loss:",
      {f: result.epochs_to_threshold(f) for f in sorted(result.pretrained_val)})
