"""Errors raised by the kforge modules.

Every error derives from ``KforgeError``. The CLI turns these into exit code 1;
usage and I/O problems exit with code 2.
"""

from collections.abc import Iterable


class KforgeError(Exception):
    """Base class for all domain errors."""


class MalformedBundle(KforgeError, ValueError):
    """A kernel image bundle is missing a file or carries a bad field."""


class InvariantViolation(KforgeError, ValueError):
    """A kernel image breaks one of its structural invariants."""

    def __init__(self, rule: str, detail: str) -> None:
        super().__init__(f"{rule}: {detail}")
        self.rule = rule
        self.detail = detail


class OutOfRange(KforgeError, ValueError):
    """An address lies outside the kernel text or overflows 64 bits."""


class MalformedTraceLine(KforgeError, ValueError):
    """A trace file line does not follow the trace format."""

    def __init__(self, line_number: int, line: str, reason: str) -> None:
        super().__init__(f"line {line_number}: {reason}: {line!r}")
        self.line_number = line_number
        self.line = line


class GranularityMismatch(KforgeError, ValueError):
    """An operation received a profile of the wrong granularity."""


class UnknownSyscall(KforgeError, LookupError):
    """A syscall list names syscalls the image does not offer."""

    def __init__(self, names: Iterable[str]) -> None:
        self.names = sorted(names)
        super().__init__(f"unknown syscalls: {', '.join(self.names)}")


class RangeOutOfImage(KforgeError, ValueError):
    """A profile range lies (partly) outside the image text."""


class InvalidProfile(KforgeError, ValueError):
    """A profile cannot be applied to the image at hand."""


class MemoryExhausted(KforgeError):
    """Launching one more kernel copy would exceed the modeled RAM."""


class UnknownPid(KforgeError, LookupError):
    """No process with the given pid exists."""


class ProcessKilled(KforgeError):
    """The target process was killed and cannot be scheduled."""


class ProtectedProcess(KforgeError):
    """The operation is not allowed on the interrupt-draining process."""


class NoRunningProcess(KforgeError):
    """The operation needs a running process but the CPU is idle."""


class AddressOutOfRange(KforgeError, ValueError):
    """A simulated kernel address lies outside the kernel text."""


class UnknownIrq(KforgeError, LookupError):
    """The interrupt has no route in the image's IRQ map."""


class KeyMissing(KforgeError, KeyError):
    """The shared kernel data store has no entry for the key."""


class ModuleInsertForbidden(KforgeError):
    """Kernel modules may only be inserted under the base kernel."""


class MalformedScenario(KforgeError, ValueError):
    """A scenario script line cannot be interpreted."""


class UnknownFunction(KforgeError, LookupError):
    """A CVE record names a function that is not a symbol of the image."""


class LengthMismatch(KforgeError, ValueError):
    """Two texts that must have equal length do not."""


class UnsupportedFormat(KforgeError, ValueError):
    """The requested report format is not supported."""


class ConfigError(KforgeError, ValueError):
    """A configuration file has unknown keys or values of the wrong type."""
