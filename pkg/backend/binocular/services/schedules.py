"""Piecewise-constant learning-rate schedules keyed by epoch."""

from torch.optim import Optimizer

from ..domain import LRSchedule


def lr_at(schedule: LRSchedule, epoch: int) -> float:
    """Learning rate of the last keypoint at or before `epoch`."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    lr = schedule[0][1]
    for start, value in schedule:
        if start > epoch:
            break
        lr = value
    return lr


def step_schedule(
    base_lr: float = 0.1, step: int = 40, gamma: float = 0.1, epochs: int = 150
) -> LRSchedule:
    """Decay `base_lr` by `gamma` every `step` epochs."""
    return tuple(
        (start, base_lr * gamma ** (start // step)) for start in range(0, max(epochs, 1), step)
    )


class EpochScheduler:
    """Sets every param group's lr from the schedule at the start of an epoch."""

    def __init__(self, optimizer: Optimizer, schedule: LRSchedule) -> None:
        self.optimizer = optimizer
        self.schedule = schedule

    def apply(self, epoch: int) -> float:
        lr = lr_at(self.schedule, epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def __repr__(self) -> str:
        return f"EpochScheduler({self.schedule})"
