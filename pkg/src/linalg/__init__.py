from .eig import EigenPair, ResponseMatrix, center_responses, covariance, response_eig, sym_eig

__all__ = ['EigenPair', 'ResponseMatrix', 'center_responses', 'covariance', 'response_eig',
           'sym_eig']
