import sys

from unihash.cli import main

sys.exit(main())
