"""
Django settings for the binocular few-shot project.

The project has no database and no HTTP surface: Django provides the settings
layer, the management-command CLI and the test integration. Everything that
varies between machines comes from the environment (optionally a .env file).

For the full list of Django settings and their values, see
https://docs.djangoproject.com/en/5.0/ref/settings/
"""

import os
from pathlib import Path
from typing import Union

from dotenv import load_dotenv

load_dotenv()  # take environment variables from .env.

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get("SECRET_KEY", "binocular-not-a-web-service")


def str2bool(arg: Union[int, str]) -> bool:
    return str(arg).lower() in ("1", "true")


DEBUG = str2bool(os.environ.get("DEBUG", "false"))

ALLOWED_HOSTS: list[str] = []

# Application definition

INSTALLED_APPS = [
    # 3rd-party
    "rest_framework",
    # app
    "binocular",
]

DATABASES: dict[str, dict[str, str]] = {}

USE_TZ = True

TIME_ZONE = "UTC"

# Runs, checkpoints and reports land under this directory unless a run config
# names another output directory.
BML_RUN_ROOT = Path(os.environ.get("BML_RUN_ROOT", "runs"))

# torch device string, e.g. "cpu", "cuda", "cuda:1"
BML_DEVICE = os.environ.get("BML_DEVICE", "cpu")

# DataLoader workers prefetching episodes; results do not depend on it.
BML_NUM_WORKERS = int(os.environ.get("BML_NUM_WORKERS", "0"))

BML_DETERMINISTIC = str2bool(os.environ.get("BML_DETERMINISTIC", "true"))

BML_LOG_LEVEL = os.environ.get("BML_LOG_LEVEL", "INFO")

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "default": {
            "format": "%(asctime)s %(levelname)s %(name)s: %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "default",
        },
    },
    "loggers": {
        "binocular": {
            "handlers": ["console"],
            "level": BML_LOG_LEVEL,
            "propagate": False,
        },
    },
}
