"""
Empowerkit - train command

Runs PPO on PlanarLift in one of the intrinsic-reward modes and writes
metrics.csv, diagnostics.csv and ckpt/ into the run directory.
"""
from ...intrinsic import TrainMode
from ...rl import train
from ..base import RunCommand


class Command(RunCommand):
    help = "Train a PPO agent on PlanarLift"

    command_name = 'train'
    config_flags = ('mode', 'steps', 'seed')

    def add_run_arguments(self, parser):
        parser.add_argument('--mode', choices=TrainMode.values)
        parser.add_argument('--steps', type=int, help="Environment step budget")
        parser.add_argument('--seed', type=int)

    def run(self, form, run_dir, options):
        result = train(form.train_config(), out_dir=run_dir)
        last = result.metrics[-1]
        return (
            f"{len(result.metrics)} iterations, {last['env_steps']} env steps: "
            f"mean extrinsic return {last['mean_extrinsic_return']:.4f}, "
            f"success rate {last['success_rate']:.2f}\n"
        )
