import sys

from mocae.cli import main

sys.exit(main())
