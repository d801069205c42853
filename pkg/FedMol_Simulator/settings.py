"""
Django settings for FedMol_Simulator project.

The project has no web surface: it hosts the Molecules app, whose management
commands (train, eval, sweep, dump_samples) drive the federated molecular GAN
simulator. Everything that varies between machines is read from the
environment (or a local .env file).

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.1/ref/settings/
"""
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('DJANGO_SECRET_KEY', 'default-secret-key')  # Default value for development
DEBUG = os.getenv('DJANGO_DEBUG', 'True').lower() in ('true', '1', 't')
ALLOWED_HOSTS = []

# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    # Custom apps
    'Molecules.apps.MoleculesConfig',
    # Third-party apps
    'rest_framework',
]

# No database: runs, reports and checkpoints are files in the run directory.
DATABASES = {}

LANGUAGE_CODE = os.getenv('DJANGO_LANGUAGE_CODE', 'en-us')

TIME_ZONE = os.getenv('DJANGO_TIME_ZONE', 'UTC')

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Simulator settings

# Root directory for run directories when a config gives no output_dir
MOLFED_OUTPUT_ROOT = Path(os.getenv('MOLFED_OUTPUT_ROOT', BASE_DIR / 'data' / 'runs'))

# Build every tensor in float64 (tight gradient-check tolerances)
MOLFED_FLOAT64 = os.getenv('MOLFED_FLOAT64', 'False').lower() in ('true', '1', 't')

# Default number of client threads per round (ignored in deterministic mode)
MOLFED_WORKERS = int(os.getenv('MOLFED_WORKERS', '1'))

MOLFED_LOG_LEVEL = os.getenv('MOLFED_LOG_LEVEL', 'INFO')

# Per-dataset defaults; explicit keys in an experiment config win
_DEFAULT_TRAINING = {
    'batch_size': 16,
    'epochs_per_round': 1000,
    'gamma': 10.0,
    'lr': 1e-4,
    'beta1': 0.5,
    'beta2': 0.999,
    'lr_decay_interval': 1000,
    'lr_decay_factor': 100.0,
    'num_clients': 4,
}

SIMULATION_PRESETS = {
    'esol': {
        **_DEFAULT_TRAINING,
        'generator_dims': [32, 128],
        'discriminator_dims': '[32,64],32,[64,1]',
        'noise_resample_interval': 1000,
    },
    'qm8': {
        **_DEFAULT_TRAINING,
        'generator_dims': [32, 64, 128],
        'discriminator_dims': '[64,128],64,[128,1]',
        'noise_resample_interval': 1000,
    },
    'qm9': {
        **_DEFAULT_TRAINING,
        'generator_dims': [64, 128, 256],
        'discriminator_dims': '[256,512],256,[512,1]',
        'noise_resample_interval': 100,
    },
}

LOG_DIR = BASE_DIR / 'log'
LOG_DIR.mkdir(exist_ok=True)

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
        'file': {
            'level': 'DEBUG',
            'class': 'logging.FileHandler',
            'filename': LOG_DIR / 'molfed_debug.log',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'django': {
            'handlers': ['console', 'file'],
            'level': os.getenv('DJANGO_LOG_LEVEL', 'WARNING'),
            'propagate': False,
        },
        'Molecules': {
            'handlers': ['console', 'file'],
            'level': MOLFED_LOG_LEVEL,
            'propagate': False,
        },
        'utils': {
            'handlers': ['console', 'file'],
            'level': MOLFED_LOG_LEVEL,
            'propagate': False,
        },
    },
}
