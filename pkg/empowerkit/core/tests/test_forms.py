import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from core.exceptions import ConfigError
from core.forms import (
    format_value,
    parse_config_file,
    parse_config_text,
    parse_overrides,
    resolve_config,
)
from core.intrinsic import FETCH_CRITIC_HIDDEN, RewardOrder, TrainMode


class ConfigTextTests(SimpleTestCase):

    def test_comments_blanks_and_repeats(self):
        text = "# header\n\nkinds = vlb  # only one\ndims=1,2\nkinds = jsd\n"
        self.assertEqual(parse_config_text(text), {'kinds': 'jsd', 'dims': '1,2'})

    def test_line_without_equals(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config_text("kinds vlb\n", 'bench.conf')
        self.assertIn('bench.conf:1', str(ctx.exception))

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            parse_config_file('/nonexistent/run.conf')

    def test_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.conf'
            path.write_text("seeds = 2\n")
            self.assertEqual(parse_config_file(path), {'seeds': '2'})

    def test_overrides(self):
        self.assertEqual(parse_overrides(['lr=0.01', ' mode = icm ']), {'lr': '0.01', 'mode': 'icm'})
        with self.assertRaises(ConfigError):
            parse_overrides(['lr'])

    def test_format_value(self):
        self.assertEqual(format_value(True), 'true')
        self.assertEqual(format_value((1, 2, 3)), '1,2,3')
        self.assertEqual(format_value(0.001), '0.001')
        self.assertEqual(format_value(('vlb', 'jsd')), 'vlb,jsd')


class ResolveConfigTests(SimpleTestCase):

    def test_defaults_are_valid(self):
        for command in ('mi_bench', 'train', 'eval', 'oracle'):
            resolve_config(command)

    def test_seed_list(self):
        form = resolve_config('mi_bench', overrides={'seeds': '3', 'base_seed': '7'})
        self.assertEqual(form.seed_list(), (7, 8, 9))

    def test_bench_defaults(self):
        data = resolve_config('mi_bench').cleaned_data
        self.assertEqual(data['kinds'], ('vlb', 'kld', 'jsd'))
        self.assertEqual(data['dims'], (1, 2, 3, 4))
        self.assertEqual(data['sizes'], (20000, 40000, 60000))
        self.assertFalse(data['strict'])

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            resolve_config('mi_bench', {'colour': 'blue'})
        self.assertIn('colour', str(ctx.exception))

    def test_invalid_values(self):
        for overrides in ({'kinds': 'vlb,mine'}, {'dims': '0'}, {'holdout_fraction': '1.0'}, {'seeds': 'two'}):
            with self.subTest(overrides=overrides), self.assertRaises(ConfigError):
                resolve_config('mi_bench', overrides=overrides)

    def test_gamma_above_one(self):
        with self.assertRaises(ConfigError):
            resolve_config('train', overrides={'gamma': '1.5'})

    def test_kld_is_not_an_empowerment_bound(self):
        with self.assertRaises(ConfigError):
            resolve_config('train', overrides={'emp_bound': 'kld'})

    def test_overrides_win_over_file(self):
        form = resolve_config('eval', {'episodes': '5'}, {'episodes': '7'})
        self.assertEqual(form.cleaned_data['episodes'], 7)

    def test_echo_round_trip(self):
        form = resolve_config('train', overrides={'mode': 'icm', 'policy_hidden': '64, 32'})
        echo = form.echo()
        self.assertIn('policy_hidden = 64,32\n', echo)
        self.assertEqual(resolve_config('train', parse_config_text(echo)).echo(), echo)

    def test_unknown_command(self):
        with self.assertRaises(ConfigError):
            resolve_config('plot')


class TrainConfigMappingTests(SimpleTestCase):

    def test_defaults(self):
        config = resolve_config('train').train_config()
        self.assertEqual(config.steps, 300000)
        self.assertEqual(config.ppo.n_envs, 60)
        self.assertEqual(config.ppo.horizon, 128)
        self.assertEqual(config.policy_hidden, (128, 64, 32))
        self.assertEqual(config.intrinsic.mode, TrainMode.EMPOWERMENT_WITH_ICM)
        self.assertEqual(config.intrinsic.emp_hidden, FETCH_CRITIC_HIDDEN)
        self.assertEqual(config.intrinsic.coef, 0.01)
        self.assertEqual(config.reward_order, RewardOrder.TRAIN_THEN_REWARD)
        self.assertEqual(config.env.reward_scale, 50.0)

    def test_overrides_reach_the_config(self):
        overrides = {'mode': 'disagreement', 'ensemble_size': '3', 'distractor_dim': '2', 'intrinsic_epochs': '4'}
        config = resolve_config('train', overrides=overrides).train_config()
        self.assertEqual(config.intrinsic.mode, 'disagreement')
        self.assertEqual(config.intrinsic.ensemble_size, 3)
        self.assertEqual(config.intrinsic.epochs, 4)
        self.assertEqual(config.env.extrinsic_dim, 4)

    def test_estimator_config(self):
        config = resolve_config('oracle', overrides={'hidden': '32,16', 'lr': '0.01'}).estimator_config()
        self.assertEqual(config.hidden, (32, 16))
        self.assertEqual(config.lr, 0.01)
