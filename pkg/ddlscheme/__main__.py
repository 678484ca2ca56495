import sys

from ddlscheme.cli import main

sys.exit(main())
