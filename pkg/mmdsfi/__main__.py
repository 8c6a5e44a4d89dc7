import sys

from mmdsfi.cli import main

sys.exit(main())
