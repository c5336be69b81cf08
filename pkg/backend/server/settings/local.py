from .base import *

DEBUG = True

BML_LOG_LEVEL = os.environ.get("BML_LOG_LEVEL", "DEBUG")

LOGGING["loggers"]["binocular"]["level"] = BML_LOG_LEVEL
