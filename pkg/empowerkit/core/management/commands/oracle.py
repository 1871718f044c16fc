"""
Empowerkit - oracle command

Trains each estimator on samples of the tabular test joints and compares the
readout with the exact conditional MI.
"""
from ...synthetic_bench import run_oracle, write_oracle_csv
from ..base import RunCommand


class Command(RunCommand):
    help = "Check the estimators against tabular joints with exact conditional MI"

    command_name = 'oracle'
    config_flags = ('kinds', 'joints', 'samples', 'seed')

    def add_run_arguments(self, parser):
        parser.add_argument('--kinds', help="Comma-separated estimator kinds (vlb,kld,jsd)")
        parser.add_argument('--joints', help="Comma-separated joints (independent,bijection,mixed_bijection)")
        parser.add_argument('--samples', type=int)
        parser.add_argument('--seed', type=int)

    def run(self, form, run_dir, options):
        data = form.cleaned_data
        rows = run_oracle(
            data['kinds'],
            data['joints'],
            samples=data['samples'],
            seed=data['seed'],
            estimator_config=form.estimator_config(),
            epochs=data['epochs'],
            support=data['support'],
            contexts=data['contexts'],
        )
        write_oracle_csv(run_dir / 'oracle.csv', rows)
        lines = [f"{'kind':<5} {'joint':<16} {'exact':>8} {'estimate':>9} {'abs_error':>9}"]
        for row in rows:
            lines.append(f"{row.kind:<5} {row.joint:<16} {row.exact:>8.4f} {row.estimate:>9.4f} {row.abs_error:>9.4f}")
        return '\n'.join(lines) + '\n'
