import csv
import logging
import threading

logger = logging.getLogger(__name__)


class BlockQuantError(Exception):
    """Base of every error raised on purpose by blockquant.

    `exit_code` is what the command line returns when the error escapes a
    subcommand.
    """
    exit_code = 1


class DimensionError(BlockQuantError, ValueError):
    pass


class UsageError(BlockQuantError, ValueError):
    pass


class InputError(BlockQuantError, ValueError):
    pass


class ParameterError(BlockQuantError, ValueError):
    pass


class DataError(BlockQuantError, KeyError):
    def __str__(self):
        # KeyError quotes its argument
        return str(self.args[0]) if self.args else ''


class ScaleError(BlockQuantError, ValueError):
    pass


class SearchError(BlockQuantError, RuntimeError):
    pass


class LoadError(BlockQuantError, OSError):
    exit_code = 2


class ConstraintError(BlockQuantError, ValueError):
    exit_code = 3

    def __init__(self, message, minimal=None):
        super().__init__(message)
        self.minimal = minimal


class NumericError(BlockQuantError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class PreconditionError(BlockQuantError, RuntimeError):
    exit_code = 5

    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


def split_to_batches(count, batch_size):
    """[0, count) in consecutive (start, end) ranges, end exclusive, the last one possibly short"""
    if batch_size <= 0:
        raise UsageError('batch size must be positive')
    for batch_start in range(0, count, batch_size):
        yield batch_start, min(batch_start + batch_size, count)


def validate_bits(bits, allowed=(2, 3, 4, 8)):
    if bits not in allowed:
        raise ParameterError('bitwidth {} not in {}'.format(bits, list(allowed)))
    return bits


class TSDictWriter(csv.DictWriter):
    """csv.DictWriter that can be shared by worker threads"""

    def __init__(self, f, fieldnames, restval="", extrasaction="raise",
                 dialect="excel", *args, **kwds):
        self._lock = threading.Lock()
        super().__init__(f, fieldnames, restval, extrasaction,
                         dialect, *args, **kwds)

    def writerow(self, rowdict):
        with self._lock:
            return super().writerow(rowdict)
