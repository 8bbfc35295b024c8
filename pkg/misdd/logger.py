from loguru import logger
from pathlib import Path
import atexit
import sys
import time


class LogThrottler:
    """A class to throttle and summarize repeated log messages."""

    def __init__(self, logger, level: str, delay: float = 5.0):
        """
        Initializes the log throttler with a logger instance, log level, and delay.

        Args:
            logger (logger): The logger instance to use.
            level (str): The log level name (e.g., 'warning').
            delay (float): The window in seconds over which identical messages
                           are folded into a single summary line.
        """
        self.logger = logger
        self.level = level.upper()
        self.delay = delay
        self.last_message: str | None = None
        self.repeat_count: int = 0
        self.window_start: float = 0.0

    def flush(self) -> None:
        """
        Prints the summary of how many times the last message was repeated.

        A message seen exactly twice is logged once more verbatim; a message seen
        three or more times collapses into a single summary line.
        """
        if self.repeat_count > 2:
            self.logger.opt(depth=2).log(
                self.level,
                f"{self.last_message} "
                f"(and {self.repeat_count - 1} more in the last {self.delay} seconds.)",
            )
        elif self.repeat_count == 2:
            self.logger.opt(depth=2).log(self.level, self.last_message)

        self.last_message = None
        self.repeat_count = 0

    def process(self, message: str, **kwargs) -> None:
        """
        Processes a log message, either logging it or incrementing a repeat counter.

        A new message is logged immediately. Repeats of the last message inside the
        time window are only counted; the count is flushed when a different message
        arrives or the window expires.

        Args:
            message (str): The log message to process.
            **kwargs: Additional keyword arguments to be passed to the logger.
        """
        now = time.monotonic()
        if self.last_message is not None and (
            message != self.last_message or now - self.window_start > self.delay
        ):
            self.flush()

        if message == self.last_message:
            self.repeat_count += 1
            return

        # Look 1 frame up the stack so the record shows the original caller.
        self.logger.opt(depth=1).log(self.level, message, **kwargs)
        self.last_message = message
        self.repeat_count = 1
        self.window_start = now


# Throttlers installed by the last setup_logger call.
_throttlers: list[LogThrottler] = []


def flush_throttled() -> None:
    """Emits the pending repeat summaries of the installed throttlers."""
    for throttler in _throttlers:
        throttler.flush()


atexit.register(flush_throttled)


def setup_logger(
    log_file: str | Path | None = None,
    verbose: int = 0,
    throttle: bool = True,
) -> None:
    """
    Sets up the global loguru logger instance, configuring sinks based on the provided parameters.

    Args:
        log_file (str | Path | None, optional): A file that receives a plain-text copy
                                                of every record. Defaults to None.
        verbose (int, optional): The verbosity level. Defaults to 0.
        throttle (bool, optional): Whether to fold repeated warnings and errors.
                                   Defaults to True.
    """
    # Pending summaries go to the old sinks before they are removed.
    flush_throttled()
    _throttlers.clear()

    # Remove the default handler to have full control over sinks.
    logger.remove()

    level = "DEBUG" if verbose >= 1 else "INFO"

    # --- Console Sink ---
    console_format = (
        "<green>{time:MMM D HH:mm:ss}</green> "
        "<cyan>{name}</cyan>[<cyan>{process}</cyan>]: "
        "<level>{message}</level>"
    )
    logger.add(sys.stderr, level=level, format=console_format)

    # --- Run Log Sink ---
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        logger.add(
            str(log_file),
            level="DEBUG",
            format="{time:YYYY-MM-DD HH:mm:ss.SSS} {name}[{process}]: {message}",
        )

    if throttle and verbose < 2:
        _throttlers.extend([LogThrottler(logger, "warning"), LogThrottler(logger, "error")])
        logger.warning = _throttlers[0].process  # type: ignore
        logger.error = _throttlers[1].process  # type: ignore


def format_log_message(
    message: str, ident: dict[str, str], verbose: int
) -> str:
    """
    Formats a log message with the given run identifier.

    Args:
        message (str): The log message to format.
        ident (dict[str, str]): A dictionary containing the run id and the grid cell name.
        verbose (int): The verbosity level of the logger.

    Returns:
        str: A formatted log message string.
    """
    if verbose > 1:
        return f"[{ident['id']}][{ident['cell']}]: {message}"
    else:
        return f"[{ident['cell']}]: {message}"
