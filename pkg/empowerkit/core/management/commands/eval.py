"""
Empowerkit - eval command

Rolls out a saved policy with its mean action and reports mean return and
success rate as JSON (eval.json in the run directory and on stdout).
"""
import json

from ...rl import evaluate_policy, load_policy
from ..base import RunCommand


class Command(RunCommand):
    help = "Evaluate a policy checkpoint on PlanarLift"

    command_name = 'eval'
    config_flags = ('episodes', 'seed')

    def add_run_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True, help="Checkpoint directory holding policy.ekp and value.ekp")
        parser.add_argument('--episodes', type=int)
        parser.add_argument('--seed', type=int)

    def identity(self, echo, options):
        return f"{echo}checkpoint = {options['checkpoint']}\n"

    def run(self, form, run_dir, options):
        nets = load_policy(options['checkpoint'])
        data = form.cleaned_data
        report = evaluate_policy(nets, form.env_config(), data['episodes'], data['seed'])
        text = json.dumps(report, indent=2, sort_keys=True) + '\n'
        (run_dir / 'eval.json').write_text(text)
        return text
