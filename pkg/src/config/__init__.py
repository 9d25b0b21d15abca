from .loader import ConfigLoader, apply_thread_limit, get_config, load_json_model

__all__ = ['ConfigLoader', 'apply_thread_limit', 'get_config', 'load_json_model']
