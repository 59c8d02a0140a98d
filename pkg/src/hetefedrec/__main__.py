import sys

from hetefedrec.cli import main

sys.exit(main())
