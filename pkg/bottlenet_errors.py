"""
BottleNet Error Handler
Exception taxonomy plus centralized, user-friendly error reporting for the CLI,
the split runtime and the load monitor
"""
import logging
from typing import Dict, Optional, Sequence, Tuple
from dataclasses import dataclass

logger = logging.getLogger(__name__)

# CLI exit codes (stable contract for scripting)
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class BottleNetError(Exception):
    """Base class for every error raised by the toolkit"""
    code = 'runtime_error'
    exit_code = EXIT_RUNTIME


class ConfigError(BottleNetError):
    code = 'config_error'
    exit_code = EXIT_USAGE


class ShapeError(BottleNetError, ValueError):
    code = 'shape_mismatch'
    exit_code = EXIT_DATA

    def __init__(self, message: str, layer_index: Optional[int] = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class BackwardError(BottleNetError):
    code = 'backward_without_forward'


class NonFiniteGradientError(BottleNetError, FloatingPointError):
    code = 'non_finite_gradient'

    def __init__(self, parameters: Sequence[str]):
        super().__init__(f"non-finite gradient for {', '.join(parameters)}; step aborted")
        self.parameters = list(parameters)


class DatasetError(BottleNetError, ValueError):
    code = 'dataset_error'
    exit_code = EXIT_DATA


class CheckpointError(BottleNetError):
    code = 'checkpoint_error'
    exit_code = EXIT_DATA


class BottleneckConfigError(BottleNetError, ValueError):
    code = 'bottleneck_config'
    exit_code = EXIT_DATA

    def __init__(self, constraint: str, detail: str):
        super().__init__(f"constraint {constraint} violated: {detail}")
        self.constraint = constraint


class CodecError(BottleNetError, ValueError):
    code = 'codec_error'
    exit_code = EXIT_DATA

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProfileError(BottleNetError):
    code = 'profile_error'
    exit_code = EXIT_DATA

    def __init__(self, message: str, missing: Sequence[int] = ()):
        if missing:
            message = f"{message}: missing partitions {sorted(missing)}"
        super().__init__(message)
        self.missing = sorted(missing)


class PlanningError(BottleNetError):
    code = 'planning_error'
    exit_code = EXIT_DATA


class ArtifactMissingError(BottleNetError):
    code = 'artifact_missing'
    exit_code = EXIT_DATA

    def __init__(self, path: str, producer: str):
        super().__init__(f"{path} not found; produce it with 'bottlenet {producer}'")
        self.path = path
        self.producer = producer


class ProtocolError(BottleNetError):
    """Malformed frame or message; error_code is the wire ERROR code"""
    code = 'protocol_error'

    def __init__(self, message: str, error_code: int = 400, fatal: bool = False):
        super().__init__(message)
        self.error_code = error_code
        # fatal: the byte stream can no longer be trusted
        self.fatal = fatal


class RemoteError(BottleNetError):
    """ERROR frame returned by the server"""
    code = 'remote_error'

    def __init__(self, error_code: int, message: str):
        super().__init__(f"server error {error_code}: {message}")
        self.error_code = error_code
        self.remote_message = message


class ConnectError(BottleNetError, ConnectionError):
    code = 'connect_failed'


class StreamError(BottleNetError, ConnectionError):
    code = 'stream_failed'


@dataclass
class ErrorInfo:
    """Error data structure for reporting"""
    code: str
    message: str
    solution: str
    exit_code: int
    is_recoverable: bool
    retry_delay: int = 0


class ErrorHandler:
    """Centralized error handling"""

    ERROR_MAPPINGS = {
        'config_error': ErrorInfo(
            code='config_error',
            message='Invalid command line or configuration file',
            solution='Run "python bottlenet.py <command> --help" and check the --config JSON overlay.',
            exit_code=EXIT_USAGE,
            is_recoverable=True
        ),
        'shape_mismatch': ErrorInfo(
            code='shape_mismatch',
            message='Tensor shape does not match the graph',
            solution='Check that the dataset dims match the graph input_shape (or the --crop size).',
            exit_code=EXIT_DATA,
            is_recoverable=True
        ),
        'dataset_error': ErrorInfo(
            code='dataset_error',
            message='Dataset file is empty or invalid',
            solution='Regenerate it with "python bottlenet.py dataset".',
            exit_code=EXIT_DATA,
            is_recoverable=True
        ),
        'checkpoint_error': ErrorInfo(
            code='checkpoint_error',
            message='Model checkpoint is unreadable',
            solution='Re-run "python bottlenet.py sweep" to rewrite the checkpoints.',
            exit_code=EXIT_DATA,
            is_recoverable=True
        ),
        'bottleneck_config': ErrorInfo(
            code='bottleneck_config',
            message='Bottleneck configuration violates a constraint',
            solution="Use c' <= c at the insertion point and filter size > s.",
            exit_code=EXIT_DATA,
            is_recoverable=True
        ),
        'codec_error': ErrorInfo(
            code='codec_error',
            message='Encoded feature is truncated or corrupt',
            solution='Check that client and server run the same codec version.',
            exit_code=EXIT_DATA,
            is_recoverable=True
        ),
        'profile_error': ErrorInfo(
            code='profile_error',
            message='Cost profile is incomplete',
            solution='Every partition needs t_mobile_ms, p_mobile_mw and t_cloud_ms at the requested load levels.',
            exit_code=EXIT_DATA,
            is_recoverable=True
        ),
        'planning_error': ErrorInfo(
            code='planning_error',
            message='No feasible partition',
            solution='Increase --epsilon or the sweep bounds (--smax, --cmax).',
            exit_code=EXIT_DATA,
            is_recoverable=True
        ),
        'artifact_missing': ErrorInfo(
            code='artifact_missing',
            message='Upstream artifact not found',
            solution='Run the command named above first.',
            exit_code=EXIT_DATA,
            is_recoverable=True
        ),
        'connect_failed': ErrorInfo(
            code='connect_failed',
            message='Cannot connect to the split-inference server',
            solution='Start it with "python bottlenet.py serve" or check --server host:port.',
            exit_code=EXIT_RUNTIME,
            is_recoverable=True,
            retry_delay=1
        ),
        'stream_failed': ErrorInfo(
            code='stream_failed',
            message='Connection dropped mid-stream',
            solution='The server closed the connection; check the server log.',
            exit_code=EXIT_RUNTIME,
            is_recoverable=True,
            retry_delay=1
        ),
        'remote_error': ErrorInfo(
            code='remote_error',
            message='Server rejected the request',
            solution='Check that --partition names a partition the server has loaded.',
            exit_code=EXIT_RUNTIME,
            is_recoverable=False
        ),
        'protocol_error': ErrorInfo(
            code='protocol_error',
            message='Malformed frame',
            solution='Client and server disagree on the wire format version.',
            exit_code=EXIT_RUNTIME,
            is_recoverable=False
        ),
    }

    # Repeating these cannot succeed until an operator intervenes
    NON_RETRY_ERRORS = ('config_error', 'checkpoint_error', 'bottleneck_config')

    def __init__(self):
        self.error_count: Dict[str, int] = {}

    def handle_exception(self, exception: Exception, context: str = "") -> ErrorInfo:
        """
        Map an exception to the ErrorInfo used for reporting

        Args:
            exception: The exception that occurred
            context: Additional context about where the error occurred

        Returns:
            ErrorInfo with message, solution and exit code
        """
        if isinstance(exception, BottleNetError):
            base = self.ERROR_MAPPINGS.get(exception.code)
            if base is not None:
                return ErrorInfo(
                    code=base.code,
                    message=f"{base.message}: {exception}",
                    solution=base.solution,
                    exit_code=exception.exit_code,
                    is_recoverable=base.is_recoverable,
                    retry_delay=base.retry_delay
                )
            return ErrorInfo(
                code=exception.code,
                message=str(exception),
                solution='See the log above for details.',
                exit_code=exception.exit_code,
                is_recoverable=False
            )
        if isinstance(exception, FileNotFoundError):
            return ErrorInfo(
                code='file_not_found',
                message=f'File not found: {exception.filename}',
                solution='Check the path, or generate the artifact with the producing command.',
                exit_code=EXIT_DATA,
                is_recoverable=True
            )
        if isinstance(exception, (ConnectionError, TimeoutError, OSError)):
            return ErrorInfo(
                code='network_error',
                message=f'Network or I/O failure: {exception}',
                solution='Check that the server is running and reachable.',
                exit_code=EXIT_RUNTIME,
                is_recoverable=True,
                retry_delay=1
            )
        return ErrorInfo(
            code='unknown_error',
            message=f'An unexpected error occurred: {exception}',
            solution='Re-run with --verbose and check the traceback.',
            exit_code=EXIT_RUNTIME,
            is_recoverable=False
        )

    def log_error(self, error: ErrorInfo, context: str = ""):
        """Log an error with appropriate level"""
        self.error_count[error.code] = self.error_count.get(error.code, 0) + 1

        log_message = f"Error [{error.code}]: {error.message}"
        if context:
            log_message += f" (Context: {context})"

        if error.is_recoverable:
            logger.warning(log_message)
        else:
            logger.error(log_message)

    def should_retry(self, error: ErrorInfo) -> Tuple[bool, int]:
        """
        Determine if a failed operation should be retried and after what delay

        Returns:
            (should_retry, delay_seconds)
        """
        if not error.is_recoverable or error.code in self.NON_RETRY_ERRORS:
            return False, 0
        return True, error.retry_delay

    def print_user_friendly_error(self, error: ErrorInfo):
        """Print a user-friendly error message"""
        print(f"\n❌ {error.message}")
        print(f"\n💡 Solution: {error.solution}")


# Global error handler instance
error_handler = ErrorHandler()
