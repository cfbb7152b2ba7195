import sys

from nldpe.cli import main

sys.exit(main())
