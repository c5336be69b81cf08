from .base import *

import torch

DEBUG = False

BML_DEVICE = os.environ.get(
    "BML_DEVICE", "cuda" if torch.cuda.is_available() else "cpu"
)

BML_NUM_WORKERS = int(os.environ.get("BML_NUM_WORKERS", "4"))

BML_RUN_ROOT.mkdir(parents=True, exist_ok=True)

LOGGING["handlers"]["file"] = {
    "class": "logging.handlers.RotatingFileHandler",
    "formatter": "default",
    "filename": str(BML_RUN_ROOT / "binocular.log"),
    "maxBytes": 10 * 1024 * 1024,
    "backupCount": 5,
}
LOGGING["loggers"]["binocular"]["handlers"] = ["console", "file"]
