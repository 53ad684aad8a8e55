import json
import os
from typing import List, Optional

import pandas as pd
from loguru import logger

from hefl.attack.sweep import SCORES, random_baseline, recovery_pairs, score_attack_sweep
from hefl.config import ExperimentConfig
from hefl.lib.artifacts import (
    allocate_dir,
    image_suffix,
    load_attack_artifacts,
    load_config,
    repetition_dir,
    save_image,
)
from hefl.lib.runner import Runner


def traced_rounds(run_dir: str, repetition: int) -> List[int]:
    trace_root = os.path.join(repetition_dir(run_dir, repetition), "traces")
    if not os.path.isdir(trace_root):
        return []
    return sorted(int(name.split("_")[1]) for name in os.listdir(trace_root) if name.startswith("round_"))


class AttackRunner(Runner):
    """
    Attacks saved rounds of a finished run and writes per-image scores, a
    per-round summary with the random baseline, and the best recoveries.
    """

    def __init__(self, run_dir: str, config: Optional[ExperimentConfig] = None):
        super().__init__(config)
        self.run_dir = run_dir
        self.run_config = load_config(run_dir)

    def run(self) -> str:
        settings = self.config.attack
        rounds = traced_rounds(self.run_dir, settings.repetition) if settings.rounds is None else list(settings.rounds)
        if not rounds:
            logger.warning(f"No rounds to attack in {self.run_dir}; the attack report will be empty")
        artifacts = load_attack_artifacts(self.run_dir, settings.repetition, rounds)
        out_dir = allocate_dir(os.path.join(self.run_dir, "attacks"), "attack-000")
        self.init_wandb(out_dir, name=f"{self.run_config.run.name}-attack", tags=["attack"])

        table = score_attack_sweep(
            artifacts,
            rounds,
            images_per_class=settings.images_per_class,
            iterations=settings.iterations,
            step=settings.step,
            seed=self.run_config.run.seed,
            fd_step=settings.fd_step,
            workers=settings.workers,
            optimizer=settings.optimizer,
            source=settings.source,
        )
        table.to_frame().to_csv(os.path.join(out_dir, "scores.csv"), index=False)
        summary = table.summary()
        if settings.baseline_images and rounds:
            baseline = random_baseline(artifacts, settings.baseline_images, seed=self.run_config.run.seed)
            summary = pd.concat(
                [summary, pd.DataFrame([{"round": -1, "is_authentic": False, "aggregate": "random", **baseline}])],
                ignore_index=True,
            )
        summary.to_csv(os.path.join(out_dir, "summary.csv"), index=False)

        for t in rounds:
            image_dir = os.path.join(out_dir, "images", f"round_{t:04d}")
            os.makedirs(image_dir)
            for metric, (reference, recovered, row) in recovery_pairs(table, artifacts, t).items():
                suffix = image_suffix(recovered)
                save_image(os.path.join(image_dir, f"best_{metric}_recovered{suffix}"), recovered)
                save_image(os.path.join(image_dir, f"best_{metric}_reference{suffix}"), reference)
            logger.info(
                "Round:{} | ".format(t)
                + " | ".join(f"{m.upper()}:{summary.loc[summary['round'] == t, m].iloc[0]:.3f}" for m in SCORES)
            )
            self.log_wandb({"round": t, **{m: float(summary.loc[summary["round"] == t, m].iloc[0]) for m in SCORES}})

        with open(os.path.join(out_dir, "attack.json"), "w") as f:
            json.dump({**settings.dict(), "run_dir": self.run_dir, "rounds": rounds}, f, indent=2)
        self.finish_wandb()
        logger.success(f"Attack results written to {out_dir}")
        return out_dir
