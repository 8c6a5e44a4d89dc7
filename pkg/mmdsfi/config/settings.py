import os
from dotenv import load_dotenv

load_dotenv()

# Domain layout
GUARD_SIZE = 4096  # fixed by the scheme, not overridable
C_CAPACITY = int(os.getenv("MMDSFI_C_CAPACITY", str(1 << 20)))
D_CAPACITY = int(os.getenv("MMDSFI_D_CAPACITY", "65536"))
STACK_RESERVE = int(os.getenv("MMDSFI_STACK_RESERVE", "16384"))

# Address space
SLOT_SIZE = 1 << 24
SLOT_BASE = int(os.getenv("MMDSFI_SLOT_BASE", str(1 << 32)), 0)
SLOT_LEADING_GAP = 1 << 16
MAX_DOMAINS = int(os.getenv("MMDSFI_MAX_DOMAINS", "64"))
LIBOS_REGION_SIZE = 4096

# Runtime
MAX_STEPS = int(os.getenv("MMDSFI_MAX_STEPS", "5000000"))
MAX_IO_LEN = int(os.getenv("MMDSFI_MAX_IO_LEN", "65536"))

# Toolchain
MAGIC_REWRITE_ATTEMPTS = int(os.getenv("MMDSFI_MAGIC_REWRITE_ATTEMPTS", "64"))

# Corpus / logging
CORPUS_DIR = os.getenv("MMDSFI_CORPUS_DIR", os.path.join(os.path.dirname(__file__), "..", "..", "corpus"))
LOG_LEVEL = os.getenv("MMDSFI_LOG_LEVEL", "INFO")
