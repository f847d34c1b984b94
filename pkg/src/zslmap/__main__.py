import sys

from zslmap.cli import main

sys.exit(main())
