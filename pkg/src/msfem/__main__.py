import sys

from msfem.driver import main

sys.exit(main())
