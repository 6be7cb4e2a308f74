"""Train and evaluate several variants on one dataset over a list of seeds.

All variants trained under one seed are scored on the same test candidate
set, so differences come from the models alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

from .data import SequenceDataset, build_eval_candidates
from .evaluation import EvalProtocol, MetricsReport, evaluate, format_table, mean_report
from .model import ModelConfig, make_variant
from .training import FitResult, TrainConfig, fit

ABLATION_ORDER = (
    "full",
    "linear_feature_mixer",
    "simple_final_mix",
    "no_sequence_mixer",
    "no_channel_mixer",
    "no_feature_mixer",
    "mlp_mixer_plus",
    "pop_rec",
)


@dataclass
class AblationResult:
    reports: dict[str, list[MetricsReport]] = field(default_factory=dict)
    fits: dict[str, list[FitResult]] = field(default_factory=dict)

    def mean(self, variant: str) -> dict[str, float]:
        return mean_report(self.reports[variant])

    def table(self, k: int = 10) -> str:
        return format_table([(v, self.mean(v)) for v in self.reports], k)

    def to_json(self) -> dict:
        return {
            v: {
                "mean": self.mean(v),
                "seeds": [r.to_json() for r in reps],
                "fits": [{"best_epoch": f.best_epoch, "epochs_run": f.epochs_run, "stopped": f.stopped,
                          "target_epoch": f.target_epoch} for f in self.fits[v]],
            }
            for v, reps in self.reports.items()
        }


def run_ablation(dataset: SequenceDataset, model_config: ModelConfig, train_config: TrainConfig,
                 variants: Sequence[str] = ABLATION_ORDER, seeds: Sequence[int] = (0, 1, 2),
                 protocol: EvalProtocol | None = None, workers: int = 1, progress=None) -> AblationResult:
    protocol = protocol or EvalProtocol(split="test")
    result = AblationResult()
    for seed in seeds:
        proto = replace(protocol, seed=seed)
        cands = build_eval_candidates(dataset, proto.split, proto.negatives, seed)
        for variant in variants:
            cfg = replace(model_config, variant=variant)
            model = make_variant(cfg, dataset.features, seed=seed)
            fr = fit(model, dataset, replace(train_config, seed=seed))
            report = evaluate(model, dataset, proto, candidates=cands, workers=workers)
            result.reports.setdefault(variant, []).append(report)
            result.fits.setdefault(variant, []).append(fr)
            if progress is not None:
                progress(variant, seed, fr, report)
    return result
