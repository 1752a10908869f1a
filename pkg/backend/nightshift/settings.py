"""
Django settings for the nightshift project.

Only process-level concerns live here: paths, worker counts and logging.
Training hyperparameters belong to the YAML run config (see augment/config.py)
and are never read from the environment.
"""

import os
from pathlib import Path
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Load environment variables from .env file
load_dotenv(BASE_DIR / '.env')

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('SECRET_KEY', 'django-insecure-nightshift-local-key')

DEBUG = os.getenv('DEBUG', 'False').lower() in ('true', '1', 'yes')

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'rest_framework',
    'augment',
]

REST_FRAMEWORK = {
    'COERCE_DECIMAL_TO_STRING': False,
}

# No ORM models are used; sqlite keeps the test runner happy.
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

USE_TZ = True
TIME_ZONE = 'UTC'


# Paths and worker pools
NIGHTSHIFT_DATA_DIR = Path(os.getenv('NIGHTSHIFT_DATA_DIR', BASE_DIR / 'data'))
NIGHTSHIFT_RUNS_DIR = Path(os.getenv('NIGHTSHIFT_RUNS_DIR', BASE_DIR / 'runs'))
NIGHTSHIFT_WORKERS = int(os.getenv('NIGHTSHIFT_WORKERS', '1'))
NIGHTSHIFT_REFERENCE_TABLE = BASE_DIR / 'fixtures' / 'reference_results.json'


# Structured logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'json': {
            '()': 'pythonjsonlogger.json.JsonFormatter',
            'fmt': '%(asctime)s %(levelname)s %(name)s %(message)s',
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'json',
        },
    },
    'loggers': {
        'augment': {
            'handlers': ['console'],
            'level': 'DEBUG' if DEBUG else 'INFO',
            'propagate': False,
        },
    },
}
