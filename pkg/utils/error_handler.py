import sys
import os
import traceback
import logging
from typing import Optional, Dict, Any, Callable
import functools

# Configure logging
logging.basicConfig(
    level=os.getenv('CCAN_LOG_LEVEL', 'INFO').upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


class CcanError(Exception):
    """Base class for every error raised by this package"""
    error_type = 'unexpected_error'


class DimensionError(CcanError):
    error_type = 'dimension_mismatch'


class ConfigurationError(CcanError):
    error_type = 'bad_configuration'


class UsageError(CcanError):
    error_type = 'bad_usage'


class FormatError(CcanError):
    """Corrupt or unsupported file content; `offset` is the byte position of the problem"""
    error_type = 'bad_format'

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EvaluationError(CcanError):
    error_type = 'evaluation_failed'


class TrainingDivergedError(CcanError):
    error_type = 'training_diverged'

    def __init__(self, message: str, epoch: int, step: int, breakdown: Optional[Dict[str, float]] = None):
        super().__init__(f"{message} (epoch {epoch}, step {step}, breakdown {breakdown})")
        self.epoch = epoch
        self.step = step
        self.breakdown = breakdown or {}


# Exit codes for the CLI
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ErrorHandler:
    """Centralized error handling with readable diagnostics"""

    ERROR_MESSAGES = {
        # Shapes and configuration
        'dimension_mismatch': {
            'title': 'Shape Mismatch',
            'message': 'Two tensors that must agree in shape did not.',
            'suggestions': [
                'Check input_h / input_w against the images in the manifest',
                'Check that the channel plan matches the checkpoint being loaded'
            ]
        },
        'bad_configuration': {
            'title': 'Configuration Problem',
            'message': 'The run configuration is invalid. Nothing was computed.',
            'suggestions': [
                'Start from a preset file under configs/; the resolved.cfg of any earlier run lists every key',
                'Spatial heights at Z1 and Z2 must be divisible by k_p',
                'batch must be divisible by v and the train split needs at least v identities'
            ]
        },
        'bad_usage': {
            'title': 'Invalid Call',
            'message': 'An operation was called with arguments it does not accept.',
            'suggestions': [
                'backward() needs a scalar loss recorded on the tape',
                'Labels must lie in [0, num_ids)'
            ]
        },

        # Files
        'bad_format': {
            'title': 'Unreadable File',
            'message': 'A tensor, checkpoint, manifest or image file is corrupt or unsupported.',
            'suggestions': [
                'Regenerate the dataset with `app.py gen-data`',
                'Only binary PPM (P6, maxval 255) images are supported'
            ]
        },
        'missing_path': {
            'title': 'File Not Found',
            'message': 'A path given in the configuration does not exist.',
            'suggestions': [
                'Paths in a manifest are resolved relative to the manifest file',
                'Run `app.py gen-data` first to create a dataset'
            ]
        },

        # Runs
        'training_diverged': {
            'title': 'Training Diverged',
            'message': 'The loss became NaN or infinite; training was stopped.',
            'suggestions': [
                'Lower lr0',
                'Check the input images for NaN values'
            ]
        },
        'evaluation_failed': {
            'title': 'Evaluation Failed',
            'message': 'No query had a relevant gallery item from another camera.',
            'suggestions': [
                'Make sure the gallery holds images of the query identities from other cameras'
            ]
        },
        'ledger_failed': {
            'title': 'Run Ledger Problem',
            'message': 'The run could not be recorded in the ledger. Outputs on disk are unaffected.',
            'suggestions': [
                'Check CCAN_DATABASE_URL',
                'Delete a stale runs.db if its schema is outdated'
            ]
        },

        # General
        'unexpected_error': {
            'title': 'Something Went Wrong',
            'message': 'We encountered an unexpected problem.',
            'suggestions': [
                'Re-run with --verbose for the full traceback'
            ]
        }
    }

    @staticmethod
    def classify(exc: BaseException) -> str:
        """Map an exception onto an ERROR_MESSAGES key"""
        if isinstance(exc, CcanError):
            return exc.error_type
        if isinstance(exc, FileNotFoundError):
            return 'missing_path'
        return 'unexpected_error'

    @staticmethod
    def exit_code_for(error_type: str) -> int:
        if error_type in ('bad_configuration', 'bad_usage', 'bad_format', 'missing_path'):
            return EXIT_CONFIG
        return EXIT_RUNTIME

    @staticmethod
    def display_error(error_type: str, technical_details: Optional[str] = None,
                      show_technical: bool = False) -> None:
        """Write a readable error message to stderr"""
        error_info = ErrorHandler.ERROR_MESSAGES.get(
            error_type,
            ErrorHandler.ERROR_MESSAGES['unexpected_error']
        )

        print(f"error: {error_info['title']}", file=sys.stderr)
        print(f"  {error_info['message']}", file=sys.stderr)
        if technical_details:
            print(f"  {technical_details.splitlines()[0]}", file=sys.stderr)

        if error_info['suggestions']:
            print("  What you can try:", file=sys.stderr)
            for suggestion in error_info['suggestions']:
                print(f"    - {suggestion}", file=sys.stderr)

        if show_technical and technical_details:
            print(technical_details, file=sys.stderr)

        logger.error(f"Error: {error_type} - {technical_details.splitlines()[0] if technical_details else ''}")

    @staticmethod
    def handle_exception(show_technical: bool = False):
        """Decorator turning exceptions of a CLI command into a diagnostic and an exit code"""
        def decorator(func: Callable) -> Callable:
            @functools.wraps(func)
            def wrapper(*args, **kwargs):
                try:
                    return func(*args, **kwargs)
                except Exception as e:
                    error_type = ErrorHandler.classify(e)
                    technical_details = f"{type(e).__name__}: {str(e)}\n{traceback.format_exc()}"
                    ErrorHandler.display_error(error_type, technical_details, show_technical)
                    return ErrorHandler.exit_code_for(error_type)
            return wrapper
        return decorator

    @staticmethod
    def safe_execute(func: Callable, error_type: str,
                     fallback_value: Any = None, show_technical: bool = False) -> Any:
        """Run a best-effort step; log instead of raising"""
        try:
            return func()
        except Exception as e:
            technical_details = f"{type(e).__name__}: {str(e)}\n{traceback.format_exc()}"
            if show_technical:
                ErrorHandler.display_error(error_type, technical_details, show_technical)
            else:
                logger.warning(f"{error_type}: {type(e).__name__}: {str(e)}")
            return fallback_value


# Convenience wrapper for ledger writes
def ledger_safe(func: Callable, fallback_value: Any = None) -> Any:
    return ErrorHandler.safe_execute(func, 'ledger_failed', fallback_value=fallback_value)
