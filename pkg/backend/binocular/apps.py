import logging

from django.apps import AppConfig
from django.conf import settings

logger = logging.getLogger(__name__)


class BinocularConfig(AppConfig):
    name = "binocular"
    verbose_name = "Binocular mutual learning"

    def ready(self) -> None:
        import torch

        if settings.BML_DETERMINISTIC:
            torch.use_deterministic_algorithms(True, warn_only=True)
            logger.debug("Deterministic torch algorithms enabled")
