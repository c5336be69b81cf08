import tempfile

from .base import *

BML_DEVICE = "cpu"

BML_NUM_WORKERS = 0

BML_DETERMINISTIC = True

BML_RUN_ROOT = Path(tempfile.gettempdir()) / "binocular-test-runs"

LOGGING["loggers"]["binocular"]["level"] = "WARNING"
