"""
Rank Worker - Background thread running one rank's program in parallel fabric mode
"""
from PySide6.QtCore import QThread, Signal

from core.fabric import drive


class RankThread(QThread):
    """Worker thread for one data-parallel rank"""

    log = Signal(str)
    rank_finished = Signal(int)  # must not be named "finished" (conflicts with QThread builtin)
    error = Signal(str)

    def __init__(self, rank, program, handle, rendezvous):
        super().__init__()
        self.rank = rank
        self.program = program
        self.handle = handle
        self.rendezvous = rendezvous
        self.result = None
        self.exception = None

    def run(self):
        """Drive the rank program, meeting the other ranks at every collective"""
        try:
            self.log.emit(f"Rank {self.rank} starting...")
            self.result = drive(self.program(self.handle), self.rendezvous.exchange, self.rank)
            self.log.emit(f"Rank {self.rank} finished after {len(self.handle.events)} events")
            self.rank_finished.emit(self.rank)
        except Exception as e:
            self.exception = e
            self.rendezvous.fail(self.rank, e)
            self.error.emit(f"Rank {self.rank}: {e}")
        finally:
            self.rendezvous.retire(self.rank)
