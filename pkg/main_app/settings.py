"""
Django settings for main_app project.

Generated by 'django-admin startproject' using Django 5.2.8.

For more information on this file, see
https://docs.djangoproject.com/en/5.2/topics/settings/

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# Quick-start development settings - unsuitable for production
# See https://docs.djangoproject.com/en/5.2/howto/deployment/checklist/

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get(
    "FASTER_SECRET_KEY", "django-insecure-2v9k!c4p#7fh0q@s1z^t$e6m8w&r3y+u5n(b)j_x-d=a*l%g"
)

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = os.environ.get("FASTER_DEBUG", "1") == "1"

ALLOWED_HOSTS = ['*']

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "root": {
        "handlers": ["console"],
        "level": os.environ.get("FASTER_LOG_LEVEL", "INFO"),
    },
}



# Application definition

INSTALLED_APPS = [
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'django.contrib.staticfiles',

    # Third-party apps
    "corsheaders",
    "rest_framework",

    # Local apps
    "schedule",
    "neural",
    "flow",
    "env",
    "pipeline",
    "wire",
    "cli",
]


REST_FRAMEWORK = {
    "DEFAULT_AUTHENTICATION_CLASSES": (),
    "DEFAULT_PERMISSION_CLASSES": ("rest_framework.permissions.AllowAny",),
    "UNAUTHENTICATED_USER": None,
    "DEFAULT_RENDERER_CLASSES": ("rest_framework.renderers.JSONRenderer",),
    "DEFAULT_PARSER_CLASSES": ("rest_framework.parsers.JSONParser",),
    "EXCEPTION_HANDLER": "core.utils.response_models.faster_exception_handler",
}


# Run defaults; a JSON config file deep-merges over these.
FASTER = {
    "seed": 0,
    "env": {
        "num_episodes": 200,
        "episode_len": 300,
        "H": 50,
        "jump_rate": 1 / 90,
        "gain": 2.0,
        "v_max": 1.0,
        "dt": 1 / 30,
    },
    "train": {
        "epochs": 20,
        "batch_size": 64,
        "p": 0.5,
        "d_max": 10,
        "lr": 1e-4,
        "betas": [0.9, 0.95],
        "eps": 1e-8,
        "weight_decay": 0.0,
        "grad_clip": 1.0,
        "hidden": [256, 256],
        "warmup_steps": 0,
        "lr_schedule": "constant",
        "holdout_fraction": 0.1,
        # held-out loss at initialization over final held-out loss; the default
        # budget measured 4.6x on the default dataset
        "loss_ratio_target": 4.5,
    },
    "schedule": {
        "N": 10,
        "alpha": 0.6,
        "u_d": 0.9,
    },
    "timing": {
        "preset": "desk",
    },
    "wire": {
        "host": "127.0.0.1",
        "port": 7777,
        "server_mode": "faster",
        "client_mode": "faster",
        "duration": 60.0,
        # sleep dt_vlm / dt_ae on the server to emulate the timing model
        "emulate": True,
        # lead added to every asynchronous trigger, seconds
        "guard": 0.01,
    },
}

MIDDLEWARE = [
    'corsheaders.middleware.CorsMiddleware',
    'django.middleware.security.SecurityMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',

    # custom middleware for response wrapping
    "core.middleware.response_wrapper.ResponseWrapperMiddleware",
]

# CORS Configuration
CORS_ALLOW_ALL_ORIGINS = True  # For development only

CORS_ALLOW_HEADERS = [
    "accept",
    "accept-encoding",
    "content-type",
    "origin",
    "user-agent",
]

ROOT_URLCONF = 'main_app.urls'

TEMPLATES = []

WSGI_APPLICATION = 'main_app.wsgi.application'


# Database
# Nothing is persisted; the database only backs Django's own bookkeeping.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization
# https://docs.djangoproject.com/en/5.2/topics/i18n/

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True


# Static files (CSS, JavaScript, Images)
# https://docs.djangoproject.com/en/5.2/howto/static-files/

STATIC_URL = 'static/'

# Default primary key field type
# https://docs.djangoproject.com/en/5.2/ref/settings/#default-auto-field

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'
