"""The whole pipeline at toy scale: pretrain on the sources, fine-tune on a
5-shot support set with feature mixing, then self-train on the unlabeled
target stream with the prototype bank filtering the pseudo-labels."""

import dataclasses

from fewshot_tta.config import RunConfig
from fewshot_tta.data import BenchmarkConfig
from fewshot_tta.fda import FdaConfig
from fewshot_tta.finetune import FinetuneConfig
from fewshot_tta.harness import run_all
from fewshot_tta.model import SourceConfig
from fewshot_tta.stream import AdaptConfig

cfg = RunConfig(
    k=5,
    widths=(3, 8, 16, 16),
    data=BenchmarkConfig(per_class_count=60),
    source=SourceConfig(iters=500, batch_size=32),
    finetune=FinetuneConfig(epochs=40, lr=1e-3, fda=FdaConfig(p_apply=0.7)),
    adapt=AdaptConfig(batch_size=32, lr=5e-4),
)

doc = run_all(cfg, methods=("source_only", "entropy_min", "ft_only", "fs_tta"))

print(f"source model accuracy on the target: {doc['source_accuracy']:.4f}")
print(f"after 5-shot fine-tuning:            {doc['stage1_accuracy']:.4f}")
print()
print(f"{'method':<14} {'stream accuracy':>15}")
for name, result in doc["methods"].items():
    print(f"{name:<14} {result['final_accuracy']:>15.4f}")

fs = doc["methods"]["fs_tta"]
kept = fs["selected_total"]
passed = fs["mask_total"]
print()
print(f"self-training kept {kept} confident samples, {passed} agreed with the "
      f"bank ({passed / max(kept, 1):.0%} consistency)")
print(f"timings: {', '.join(f'{k} {v:.1f}s' for k, v in doc['seconds'].items())}")

# at this toy scale stage 1 already hits the ceiling and the bank simply
# keeps the self-training honest; the stage 2 margin needs the full-width
# default benchmark, where the acceptance suite measures it over 5 trials
trial_note = dataclasses.replace(cfg, trial_seed=1)
doc2 = run_all(trial_note, methods=("fs_tta",))
print(f"re-rolled trial seed: fs_tta {doc2['methods']['fs_tta']['final_accuracy']:.4f} "
      f"(support split and stream order change, data and source model do not)")
