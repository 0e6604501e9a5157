"""Privacy-preserving approximate nearest neighbor search.

Filter with HNSW over scale-and-perturb ciphertexts, refine with exact
distance comparison encryption. Also ships a reference ASPE scheme and the
known-plaintext attacks that break it.
"""

from .dce import DceSecretKey, distance_comp, encrypt_db, keygen, trapgen
from .dcpe import SapKey, sap_encrypt, sap_keygen
from .graph import HnswGraph
from .search import EncryptedDatabase, QueryCiphertext, SearchResult

__version__ = "0.1.0"

__all__ = [
    "DceSecretKey",
    "EncryptedDatabase",
    "HnswGraph",
    "QueryCiphertext",
    "SapKey",
    "SearchResult",
    "distance_comp",
    "encrypt_db",
    "keygen",
    "sap_encrypt",
    "sap_keygen",
    "trapgen",
]
