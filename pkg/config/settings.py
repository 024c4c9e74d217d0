"""
Django settings for the hybrid SNN-ANN deployment toolkit.
"""
import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Security settings
SECRET_KEY = os.getenv('SECRET_KEY', 'django-insecure-hybrid-snn-local-only')
DEBUG = os.getenv('DEBUG', 'True') == 'True'
ALLOWED_HOSTS = os.getenv('ALLOWED_HOSTS', 'localhost,127.0.0.1').split(',')


# Application definition

INSTALLED_APPS = [
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'rest_framework',
    'hybrid',
]

# Management commands only; the database is never touched by the services.
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

USE_TZ = True
TIME_ZONE = 'UTC'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Logging
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'hybrid': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}

# REST Framework settings (serializers validate config/report files)
REST_FRAMEWORK = {
    'DEFAULT_RENDERER_CLASSES': [
        'rest_framework.renderers.JSONRenderer',
    ],
    'DEFAULT_PARSER_CLASSES': [
        'rest_framework.parsers.JSONParser',
    ],
}

# Parallelism
HYBRID_NUM_THREADS = int(os.getenv('HYBRID_NUM_THREADS', '1'))

# CUBA-LIF neuron defaults
LIF_CURRENT_DECAY = float(os.getenv('LIF_CURRENT_DECAY', '0.25'))
LIF_VOLTAGE_DECAY = float(os.getenv('LIF_VOLTAGE_DECAY', '0.1'))
LIF_THRESHOLD = float(os.getenv('LIF_THRESHOLD', '1.0'))
SURROGATE_WIDTH = float(os.getenv('SURROGATE_WIDTH', '0.5'))

# Spike pooling: 'or' (window OR) or 'sum_threshold'
SPIKE_POOL_MODE = os.getenv('SPIKE_POOL_MODE', 'or')
SPIKE_POOL_THRESHOLD = float(os.getenv('SPIKE_POOL_THRESHOLD', '1.0'))

# Accumulator
ACCUMULATOR_PAD_FINAL_GROUP = os.getenv('ACCUMULATOR_PAD_FINAL_GROUP', 'False') == 'True'

# BPTT history budget (u, pre-reset v and spikes for every neuron and timestep)
BPTT_MEMORY_BUDGET_MB = int(os.getenv('BPTT_MEMORY_BUDGET_MB', '2048'))

# Input shapes (polarity, height, width, timesteps)
DESK_INPUT_SHAPE = (2, 32, 32, 20)
SWEEP_INPUT_SHAPE = (2, 32, 32, 50)
GESTURE_INPUT_SHAPE = (2, 128, 128, 50)
DEFAULT_CLASS_COUNT = int(os.getenv('DEFAULT_CLASS_COUNT', '3'))
SWEEP_INTERVALS = (5, 10, 25)

# Event binning
EVENT_BIN_MS = int(os.getenv('EVENT_BIN_MS', '10'))
FRAMES_PER_SAMPLE = int(os.getenv('FRAMES_PER_SAMPLE', '50'))
EVENT_SORT_TOLERANCE_US = int(os.getenv('EVENT_SORT_TOLERANCE_US', '1000'))

# Trainer defaults
TRAIN_EPOCHS = int(os.getenv('TRAIN_EPOCHS', '30'))
TRAIN_BATCH_SIZE = int(os.getenv('TRAIN_BATCH_SIZE', '16'))
TRAIN_LEARNING_RATE = float(os.getenv('TRAIN_LEARNING_RATE', '1e-3'))
TRAIN_BETA1 = float(os.getenv('TRAIN_BETA1', '0.9'))
TRAIN_BETA2 = float(os.getenv('TRAIN_BETA2', '0.999'))
TRAIN_EPSILON = float(os.getenv('TRAIN_EPSILON', '1e-8'))
TRAIN_CLIP_NORM = float(os.getenv('TRAIN_CLIP_NORM', '5.0'))
TRAIN_TEST_FRACTION = float(os.getenv('TRAIN_TEST_FRACTION', '0.2'))

# Accumulator hardware
COUNTER_BANK_SIZE = int(os.getenv('COUNTER_BANK_SIZE', '128'))
ACCUMULATOR_CLOCK_HZ = float(os.getenv('ACCUMULATOR_CLOCK_HZ', '100e6'))

# Data directories
DATA_DIR = Path(os.getenv('HYBRID_DATA_DIR', BASE_DIR / 'data'))
DATASETS_DIR = DATA_DIR / 'datasets'
RUNS_DIR = DATA_DIR / 'runs'
TRACES_DIR = DATA_DIR / 'traces'
REPORTS_DIR = DATA_DIR / 'reports'

DEFAULT_PROFILE_PATH = BASE_DIR / 'hybrid' / 'data' / 'default_profiles.json'
