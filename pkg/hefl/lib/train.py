import os

from loguru import logger

from hefl.lib.artifacts import allocate_dir, repetition_dir, repetition_seed, save_repetition, write_run_header
from hefl.lib.runner import Runner
from hefl.protocol import HistoryRecord, RoundRecord, run_training


class TrainRunner(Runner):
    """Runs every repetition of one configuration into a fresh run directory."""

    def run(self) -> str:
        config = self.config
        run_dir = allocate_dir(config.run.output_dir, config.run.name)
        write_run_header(run_dir, config)
        logger.info(f"Training {config.run.repetitions} repetition(s) into {run_dir}")

        for repetition in range(config.run.repetitions):
            seed = repetition_seed(config, repetition)
            rep_dir = repetition_dir(run_dir, repetition)
            self.init_wandb(
                run_dir,
                name=f"{config.run.name}-rep{repetition}",
                tags=[f"rho_{config.schedule.rho_syn}/{config.schedule.rho_tot}", f"eta_{config.crypto.eta}"],
            )

            def _on_round(entry: HistoryRecord, record: RoundRecord):
                self.log_wandb({**entry.dict(), **record.dict(exclude={"round", "is_authentic"})})

            logger.info(f"Repetition {repetition} (seed {seed})")
            result = run_training(config, seed=seed, on_round=_on_round)
            save_repetition(rep_dir, result)
            peak_round, peak_accuracy = result.peak
            logger.success(
                f"Repetition:{repetition} | Rounds:{len(result.history)} | Acc:{result.history[-1].test_accuracy:.2f} | "
                f"Peak:{peak_accuracy:.2f}@{peak_round} | Dir:{os.path.basename(rep_dir)}"
            )
        self.finish_wandb()
        return run_dir
