"""Loss-toggle and encoder-freeze ablations on one dataset/split."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .geodata import Dataset, SplitAssignment
from .infer_eval import evaluate_model, training_addresses
from .trainer import TrainConfig, train

# (use_address, use_caption, use_geography)
LOSS_ROWS = {
    "address_only": (True, False, False),
    "caption_only": (False, True, False),
    "address+caption": (True, True, False),
    "address+geography": (True, False, True),
    "full": (True, True, True),
}
# (freeze_image, freeze_text)
FREEZE_ROWS = {
    "train_image_only": (False, True),
    "train_text_only": (True, False),
    "train_both": (False, False),
}
# SSA-1 (%) on Pitts-IAL at full scale; shown alongside, never compared against
REFERENCE_SSA1 = {
    "address_only": 77.66,
    "caption_only": 69.27,
    "address+caption": 79.20,
    "address+geography": 79.27,
    "full": 80.39,
    "train_image_only": 77.77,
    "train_text_only": 48.88,
    "train_both": 80.39,
}
METRICS = ("ssa1", "ssa5", "sa1", "sa5")


@dataclass
class AblationReport:
    rows: dict[str, dict]

    def is_complete(self, include_freeze: bool = True) -> bool:
        names = set(LOSS_ROWS) | (set(FREEZE_ROWS) if include_freeze else set())
        return names <= set(self.rows) and all(set(METRICS) <= set(r) for r in self.rows.values())

    def to_json(self) -> dict:
        return {"rows": self.rows, "reference_ssa1_percent": REFERENCE_SSA1}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def ablation_configs(base: TrainConfig, include_freeze: bool = True) -> dict[str, TrainConfig]:
    out = {
        name: replace(base, use_address=a, use_caption=c, use_geography=g)
        for name, (a, c, g) in LOSS_ROWS.items()
    }
    if include_freeze:
        out.update({
            name: replace(base, freeze_image=fi, freeze_text=ft)
            for name, (fi, ft) in FREEZE_ROWS.items()
        })
    return out


def run_ablation(ds: Dataset, split: SplitAssignment, base: TrainConfig = TrainConfig(),
                 include_freeze: bool = True) -> AblationReport:
    candidates = training_addresses(ds, split.train)
    rows = {}
    for name, cfg in ablation_configs(base, include_freeze).items():
        params, log = train(ds, split, cfg)
        report = evaluate_model(ds, split.query, candidates, params)
        rows[name] = {
            **report.rates(),
            "use_address": cfg.use_address,
            "use_caption": cfg.use_caption,
            "use_geography": cfg.use_geography,
            "freeze_image": cfg.freeze_image,
            "freeze_text": cfg.freeze_text,
            "final_loss": log.final["l_total"],
        }
    return AblationReport(rows)
