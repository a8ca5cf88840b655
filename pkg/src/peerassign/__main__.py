import sys

from peerassign.cli import main

sys.exit(main())
