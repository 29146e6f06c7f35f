import sys

from routebench.cli import main

sys.exit(main())
