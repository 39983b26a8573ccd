from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Nothing is served over HTTP; Django is used for settings, commands,
# templates and the test runner.
SECRET_KEY = os.environ.get('EDGEBENCH_SECRET_KEY', 'django-insecure-edgebench-local-only')

DEBUG = False

ALLOWED_HOSTS = []

# Application definition

INSTALLED_APPS = [
    'pipeline.apps.PipelineConfig',
]

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [],
        },
    },
]

# No database: the pipeline works on files (.plite models, image folders,
# JSON benchmark records).
DATABASES = {}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Deployment overrides for the pipeline defaults in pipeline/conf.py.
# Command-line flags override both per run.

EDGEBENCH = {}
if 'EDGEBENCH_SEED' in os.environ:
    EDGEBENCH['SEED'] = int(os.environ['EDGEBENCH_SEED'])


# Logging

LOG_LEVEL = os.environ.get('EDGEBENCH_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '{levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'edgebench': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
        'pipeline': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}
