"""
Django settings for empowerkit project.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')

SECRET_KEY = os.environ.get('SECRET_KEY', 'empowerkit-local-key')

DEBUG = os.environ.get('EMPOWERKIT_DEBUG', '') == '1'

ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    'core',
]

# Database (run records only). PostgreSQL when the PG* variables are set.
if os.environ.get('PGDATABASE'):
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.postgresql',
            'NAME': os.environ.get('PGDATABASE', 'postgres'),
            'USER': os.environ.get('PGUSER', 'postgres'),
            'PASSWORD': os.environ.get('PGPASSWORD', 'postgres'),
            'HOST': os.environ.get('PGHOST', 'localhost'),
            'PORT': os.environ.get('PGPORT', '5432'),
        }
    }
else:
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.sqlite3',
            'NAME': BASE_DIR / 'db.sqlite3',
        }
    }

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

# Default primary key field type
DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Output root for run directories: <EMPOWERKIT_OUT>/<run_id>/
EMPOWERKIT_OUT = os.environ.get('EMPOWERKIT_OUT', str(BASE_DIR / 'out'))

# Defaults for every command's RunConfig. Values are the strings a config
# file would carry; the config forms parse and validate them.
EMPOWERKIT_DEFAULTS = {
    'mi_bench': {
        'kinds': 'vlb,kld,jsd',
        'dims': '1,2,3,4',
        'sizes': '20000,40000,60000',
        'seeds': '5',
        'base_seed': '0',
        'sigma_z': '1.0',
        'noise': '0.5',
        'hidden': '256',
        'activation': 'relu',
        'lr': '0.001',
        'batch_size': '256',
        'epochs': '20',
        'holdout_fraction': '0.1',
        'grid_size': '2000',
        'samples_per_z': '128',
        'record_timing': 'false',
        'strict': 'false',
    },
    'train': {
        'mode': 'empowerment_with_icm',
        'seed': '0',
        'steps': '300000',
        'n_envs': '60',
        'horizon': '128',
        'gamma': '0.99',
        'lam': '0.95',
        'clip_eps': '0.2',
        'epochs_per_update': '10',
        'minibatch': '256',
        'lr': '0.0002',
        'entropy_coef': '0.0',
        'value_coef': '0.5',
        'policy_hidden': '128,64,32',
        'forward_hidden': '256',
        'ensemble_size': '5',
        'emp_bound': 'jsd',
        'emp_hidden': '512,512,216,128,64,32',
        'emp_glu_layers': '0',
        'emp_lr': '0.0002',
        'intrinsic_coef': '0.01',
        'intrinsic_epochs': '1',
        'intrinsic_minibatch': '256',
        'reward_order': 'train_then_reward',
        'blend_threshold': '0.12',
        'blend_slope': '200',
        'threshold_source': 'raw',
        'grasp_radius': '0.03',
        'grip_close_threshold': '0.5',
        'lift_threshold': '0.01',
        'reward_scale': '50',
        'episode_len': '100',
        'distractor_dim': '0',
        'checkpoint_every': '10',
        'replay_capacity': '100000',
        'record_timing': 'false',
    },
    'eval': {
        'episodes': '100',
        'seed': '0',
        'grasp_radius': '0.03',
        'grip_close_threshold': '0.5',
        'lift_threshold': '0.01',
        'reward_scale': '50',
        'episode_len': '100',
        'distractor_dim': '0',
    },
    'oracle': {
        'kinds': 'vlb,kld,jsd',
        'joints': 'independent,bijection,mixed_bijection',
        'samples': '20000',
        'seed': '0',
        'hidden': '256',
        'activation': 'relu',
        'lr': '0.001',
        'batch_size': '256',
        'epochs': '30',
        'holdout_fraction': '0.1',
        'contexts': '2',
        'support': '4',
    },
}

# Configure logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': os.getenv('DJANGO_LOG_LEVEL', 'WARNING'),
            'propagate': False,
        },
        'core': {
            'handlers': ['console'],
            'level': os.getenv('EMPOWERKIT_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}
