"""Task identifiers."""

DET = "det"
SEM = "sem"
DRIV = "driv"

#: Canonical task order; also the round-robin cycle.
TASKS = (DET, SEM, DRIV)
SEG_TASKS = (SEM, DRIV)

IGNORE_INDEX = 255


def check_task(task):
    if task not in TASKS:
        from .exceptions import ConfigurationError

        raise ConfigurationError(f"unknown task id {task!r}; expected one of {TASKS}")
    return task
