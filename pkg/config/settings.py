"""
Django settings for the hashed probability pyramid toolkit.

Everything process-wide is read from the environment (a ``.env`` file at the
project root is honoured). Run-level knobs live in RunConfig files, see
``splatting/forms.py``.
"""

from pathlib import Path
import os
from dotenv import load_dotenv

BASE_DIR = Path(__file__).resolve().parent.parent

# Load environment variables from .env (project root) and .venv/.env if present.
load_dotenv(BASE_DIR / ".env")
load_dotenv(BASE_DIR / ".venv" / ".env")


SECRET_KEY = os.environ.get(
    "SECRET_KEY", "hpp-insecure-0v7k#m2r9wq!x4c(e8t1bz%u5l$j3n6a@dy"
)

DEBUG = os.environ.get("DEBUG", "False").lower() == "true"

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'probability',
    'splatting',
]


# Database
# Only the training-run log is stored. SQLite unless POSTGRES_DB is set.

if os.environ.get('POSTGRES_DB'):
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.postgresql',
            'NAME': os.environ.get('POSTGRES_DB'),
            'USER': os.environ.get('POSTGRES_USER', 'postgres'),
            'PASSWORD': os.environ.get('POSTGRES_PASSWORD', 'postgres'),
            'HOST': os.environ.get('POSTGRES_HOST', 'localhost'),
            'PORT': os.environ.get('POSTGRES_PORT', '5432'),
        }
    }
else:
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.sqlite3',
            'NAME': BASE_DIR / 'hpp.sqlite3',
        }
    }


LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging

HPP_LOG_LEVEL = os.environ.get("HPP_LOG_LEVEL", "INFO").upper()

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "loggers": {
        "probability": {"handlers": ["console"], "level": HPP_LOG_LEVEL, "propagate": False},
        "splatting": {"handlers": ["console"], "level": HPP_LOG_LEVEL, "propagate": False},
    },
}


# Toolkit

HPP_THREADS = max(1, int(os.environ.get("HPP_THREADS", os.cpu_count() or 1)))
HPP_OUTPUT_DIR = Path(os.environ.get("HPP_OUTPUT_DIR", BASE_DIR / "runs"))
# Full-size acceptance experiments in the test suite (minutes to tens of minutes).
HPP_SLOW_TESTS = os.environ.get("HPP_SLOW_TESTS", "0").lower() in ("1", "true", "yes")
