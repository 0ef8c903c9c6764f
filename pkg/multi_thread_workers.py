import traceback
from typing import Any, Callable, Sequence, Tuple

from joblib import Parallel, delayed

_ERROR_TEXT_LIMIT = 2000


def _short_traceback() -> str:
    err_msg = traceback.format_exc()
    if (len(err_msg) > _ERROR_TEXT_LIMIT):
        first = err_msg[:_ERROR_TEXT_LIMIT // 2]
        second = err_msg[-_ERROR_TEXT_LIMIT // 2:]
        err_msg = first + '  ... Middle part hidden due to length limit ...  ' + second
    return err_msg


def map_ordered(func: Callable[[Any], Any], inputs: Sequence, n_jobs: int = 1) -> list:
    '''
    Apply ``func`` to every input and return the results in input order.

    Exceptions propagate. ``n_jobs == 1`` runs inline, which keeps tracebacks
    and debugging simple.
    '''
    assert (n_jobs >= 1)
    if (n_jobs == 1 or len(inputs) <= 1):
        return [func(item) for item in inputs]
    return Parallel(n_jobs=min(n_jobs, len(inputs)), prefer="threads")(
        delayed(func)(item) for item in inputs
    )


def map_capture_errors(func: Callable[[Any], Any], inputs: Sequence, n_jobs: int = 1) -> list[Tuple[bool, Any]]:
    '''
    Like ``map_ordered`` but never raises: each slot is ``(True, value)`` or
    ``(False, error_text)`` with the traceback truncated for logging.
    '''
    def guarded(item):
        try:
            return (True, func(item))
        except Exception:
            return (False, _short_traceback())

    return map_ordered(guarded, inputs, n_jobs)
