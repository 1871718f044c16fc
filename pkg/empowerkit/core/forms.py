"""
Empowerkit - Forms

This module contains the run-configuration forms for the management commands
and the helpers that read, resolve and echo flat ``key = value`` configs.
"""
import math
from pathlib import Path

from django import forms
from django.conf import settings
from django.core.exceptions import ValidationError

from .env import EnvConfig
from .exceptions import ConfigError
from .intrinsic import IntrinsicConfig, RewardOrder, ThresholdSource, TrainMode
from .mi_estimators import EstimatorConfig, EstimatorKind
from .numerics import ACTIVATIONS
from .rl import PpoConfig, TrainConfig
from .synthetic_bench import ORACLE_JOINTS


class CommaSeparatedField(forms.CharField):
    """A comma-separated list, cleaned to a tuple of ``item_type``."""

    def __init__(self, item_type=int, choices=None, min_value=None, **kwargs):
        self.item_type = item_type
        self.item_choices = tuple(choices) if choices is not None else None
        self.item_min = min_value
        super().__init__(**kwargs)

    def to_python(self, value):
        value = super().to_python(value)
        items = [item.strip() for item in value.split(',') if item.strip()]
        try:
            return tuple(self.item_type(item) for item in items)
        except ValueError:
            raise ValidationError(f"expected a comma-separated list of {self.item_type.__name__} values")

    def validate(self, value):
        if not value:
            raise ValidationError("at least one value is required")
        for item in value:
            if self.item_choices is not None and item not in self.item_choices:
                raise ValidationError(f"{item!r} is not one of {', '.join(self.item_choices)}")
            if self.item_min is not None and item < self.item_min:
                raise ValidationError(f"values must be at least {self.item_min}")


class PositiveFloatField(forms.FloatField):

    def validate(self, value):
        super().validate(value)
        if value is not None and value <= 0:
            raise ValidationError("must be positive")


class FractionField(forms.FloatField):
    """A float strictly between 0 and 1."""

    def validate(self, value):
        super().validate(value)
        if value is not None and not 0.0 < value < 1.0:
            raise ValidationError("must lie strictly between 0 and 1")


def flag_field():
    return forms.TypedChoiceField(choices=[('true', 'true'), ('false', 'false')], coerce=lambda v: v == 'true')


class RunConfigForm(forms.Form):
    """Base for every command config; ``command`` keys into EMPOWERKIT_DEFAULTS."""

    command = None

    def echo(self):
        """Canonical ``key = value`` text of the cleaned config, in field order."""
        return ''.join(f"{name} = {format_value(self.cleaned_data[name])}\n" for name in self.fields)


class EnvFieldsMixin(forms.Form):
    grasp_radius = PositiveFloatField()
    grip_close_threshold = PositiveFloatField()
    lift_threshold = PositiveFloatField()
    reward_scale = PositiveFloatField()
    episode_len = forms.IntegerField(min_value=1)
    distractor_dim = forms.IntegerField(min_value=0)

    def env_config(self):
        data = self.cleaned_data
        return EnvConfig(
            grasp_radius=data['grasp_radius'],
            grip_close_threshold=data['grip_close_threshold'],
            lift_threshold=data['lift_threshold'],
            reward_scale=data['reward_scale'],
            episode_len=data['episode_len'],
            distractor_dim=data['distractor_dim'],
        )


class EstimatorFieldsMixin(forms.Form):
    hidden = CommaSeparatedField(min_value=1)
    activation = forms.ChoiceField(choices=[(name, name) for name in ACTIVATIONS])
    lr = PositiveFloatField()
    batch_size = forms.IntegerField(min_value=1)
    epochs = forms.IntegerField(min_value=0)
    holdout_fraction = FractionField()

    def estimator_config(self):
        data = self.cleaned_data
        return EstimatorConfig(
            hidden=data['hidden'],
            activation=data['activation'],
            lr=data['lr'],
            batch_size=data['batch_size'],
            holdout_fraction=data['holdout_fraction'],
        )


class MiBenchConfigForm(EstimatorFieldsMixin, RunConfigForm):
    command = 'mi_bench'

    kinds = CommaSeparatedField(item_type=str, choices=EstimatorKind.values)
    dims = CommaSeparatedField(min_value=1)
    sizes = CommaSeparatedField(min_value=2)
    seeds = forms.IntegerField(min_value=1, help_text="Number of seeds per cell")
    base_seed = forms.IntegerField(min_value=0)
    sigma_z = PositiveFloatField()
    noise = PositiveFloatField()
    grid_size = forms.IntegerField(min_value=1)
    samples_per_z = forms.IntegerField(min_value=1)
    record_timing = flag_field()
    strict = flag_field()

    field_order = ['kinds', 'dims', 'sizes', 'seeds', 'base_seed', 'sigma_z', 'noise']

    def seed_list(self):
        base = self.cleaned_data['base_seed']
        return tuple(range(base, base + self.cleaned_data['seeds']))


class TrainConfigForm(EnvFieldsMixin, RunConfigForm):
    command = 'train'

    mode = forms.ChoiceField(choices=TrainMode.choices)
    seed = forms.IntegerField(min_value=0)
    steps = forms.IntegerField(min_value=1)
    n_envs = forms.IntegerField(min_value=1)
    horizon = forms.IntegerField(min_value=1)
    gamma = PositiveFloatField()
    lam = forms.FloatField(min_value=0.0, max_value=1.0)
    clip_eps = PositiveFloatField()
    epochs_per_update = forms.IntegerField(min_value=1)
    minibatch = forms.IntegerField(min_value=1)
    lr = PositiveFloatField()
    entropy_coef = forms.FloatField(min_value=0.0)
    value_coef = forms.FloatField(min_value=0.0)
    policy_hidden = CommaSeparatedField(min_value=1)
    forward_hidden = CommaSeparatedField(min_value=1)
    ensemble_size = forms.IntegerField(min_value=2)
    emp_bound = forms.ChoiceField(choices=[(EstimatorKind.VLB, 'VLB'), (EstimatorKind.JSD, 'JSD')])
    emp_hidden = CommaSeparatedField(min_value=1)
    emp_glu_layers = forms.IntegerField(min_value=0)
    emp_lr = PositiveFloatField()
    intrinsic_coef = forms.FloatField(min_value=0.0)
    intrinsic_epochs = forms.IntegerField(min_value=0)
    intrinsic_minibatch = forms.IntegerField(min_value=1)
    reward_order = forms.ChoiceField(choices=RewardOrder.choices)
    blend_threshold = forms.FloatField()
    blend_slope = PositiveFloatField()
    threshold_source = forms.ChoiceField(choices=ThresholdSource.choices)
    checkpoint_every = forms.IntegerField(min_value=0)
    replay_capacity = forms.IntegerField(min_value=0)
    record_timing = flag_field()

    def clean_gamma(self):
        gamma = self.cleaned_data['gamma']
        if gamma > 1.0:
            raise ValidationError("gamma must lie in (0, 1]")
        return gamma

    def train_config(self):
        data = self.cleaned_data
        ppo = PpoConfig(
            gamma=data['gamma'],
            lam=data['lam'],
            clip_eps=data['clip_eps'],
            epochs_per_update=data['epochs_per_update'],
            minibatch=data['minibatch'],
            lr=data['lr'],
            entropy_coef=data['entropy_coef'],
            value_coef=data['value_coef'],
            horizon=data['horizon'],
            n_envs=data['n_envs'],
        )
        intrinsic = IntrinsicConfig(
            mode=data['mode'],
            forward_hidden=data['forward_hidden'],
            forward_lr=data['lr'],
            ensemble_size=data['ensemble_size'],
            emp_bound=data['emp_bound'],
            emp_hidden=data['emp_hidden'],
            emp_glu_layers=data['emp_glu_layers'],
            emp_lr=data['emp_lr'],
            coef=data['intrinsic_coef'],
            epochs=data['intrinsic_epochs'],
            minibatch=data['intrinsic_minibatch'],
            blend_threshold=data['blend_threshold'],
            blend_slope=data['blend_slope'],
            threshold_source=data['threshold_source'],
        )
        return TrainConfig(
            steps=data['steps'],
            seed=data['seed'],
            ppo=ppo,
            intrinsic=intrinsic,
            env=self.env_config(),
            policy_hidden=data['policy_hidden'],
            reward_order=data['reward_order'],
            checkpoint_every=data['checkpoint_every'],
            replay_capacity=data['replay_capacity'],
            record_timing=data['record_timing'],
        )


class EvalConfigForm(EnvFieldsMixin, RunConfigForm):
    command = 'eval'

    episodes = forms.IntegerField(min_value=0)
    seed = forms.IntegerField(min_value=0)

    field_order = ['episodes', 'seed']


class OracleConfigForm(EstimatorFieldsMixin, RunConfigForm):
    command = 'oracle'

    kinds = CommaSeparatedField(item_type=str, choices=EstimatorKind.values)
    joints = CommaSeparatedField(item_type=str, choices=tuple(ORACLE_JOINTS))
    samples = forms.IntegerField(min_value=2)
    seed = forms.IntegerField(min_value=0)
    contexts = forms.IntegerField(min_value=1)
    support = forms.IntegerField(min_value=2)

    field_order = ['kinds', 'joints', 'samples', 'seed']


CONFIG_FORMS = {
    form.command: form for form in (MiBenchConfigForm, TrainConfigForm, EvalConfigForm, OracleConfigForm)
}


def format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ','.join(format_value(item) for item in value)
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return str(value)


def parse_config_text(text, source='<config>'):
    """
    Parse ``key = value`` lines. Blank lines and ``#`` comments are skipped;
    a repeated key keeps its last value.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        values[key] = value.strip()
    return values


def parse_config_file(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def parse_overrides(pairs):
    """``--set key=value`` pairs to a dict."""
    values = {}
    for pair in pairs or ():
        key, sep, value = pair.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        values[key.strip()] = value.strip()
    return values


def resolve_config(command, file_values=None, overrides=None):
    """
    Merge defaults, file values and overrides (later wins) and validate.

    Returns:
        The bound, valid form for ``command``

    Raises:
        ConfigError: unknown keys or invalid values
    """
    try:
        form_class = CONFIG_FORMS[command]
    except KeyError:
        raise ConfigError(f"unknown command {command!r}")
    data = dict(settings.EMPOWERKIT_DEFAULTS[command])
    for source in (file_values or {}, overrides or {}):
        unknown = sorted(set(source) - set(form_class.base_fields))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        data.update({key: str(value) for key, value in source.items()})

    form = form_class(data)
    if not form.is_valid():
        problems = '; '.join(f"{field}: {' '.join(errors)}" for field, errors in form.errors.items())
        raise ConfigError(f"invalid {command} config: {problems}")
    return form


def echo_config(form):
    return form.echo()
