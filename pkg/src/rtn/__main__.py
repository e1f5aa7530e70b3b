import sys

from rtn.cli import main

sys.exit(main())
