from .logger import configure_from_dict, get_logger, log_duration, set_run_context, setup_logging

__all__ = ['configure_from_dict', 'get_logger', 'log_duration', 'set_run_context', 'setup_logging']
