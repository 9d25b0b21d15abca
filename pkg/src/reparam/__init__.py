from .response_init import (
    ProbeSet,
    collect_responses,
    default_sample_count,
    factored_conversion,
    fold_nff,
    identity_conversion,
    response_initialize,
)
from .equivalence import verify_equivalence

__all__ = [
    'ProbeSet', 'collect_responses', 'default_sample_count', 'factored_conversion', 'fold_nff',
    'identity_conversion', 'response_initialize', 'verify_equivalence',
]
