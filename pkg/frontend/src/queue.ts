/** At most one request in flight; rapid submissions queue latest-wins. */

export class LatestWins {
  private busy = false;
  private pending: (() => Promise<void>) | null = null;

  /** True while a task is running (queued work may still follow). */
  get inFlight(): boolean {
    return this.busy;
  }

  /** Resolves once the current task and anything queued behind it finish. */
  async idle(): Promise<void> {
    while (this.busy) {
      await new Promise((r) => setTimeout(r, 0));
    }
  }

  submit(task: () => Promise<void>): void {
    if (this.busy) {
      this.pending = task; // replaces any earlier queued task
      return;
    }
    void this.drain(task);
  }

  private async drain(first: () => Promise<void>): Promise<void> {
    this.busy = true;
    try {
      let current: (() => Promise<void>) | null = first;
      while (current) {
        try {
          await current();
        } catch {
          // tasks surface their own errors to the UI
        }
        current = this.pending;
        this.pending = null;
      }
    } finally {
      this.busy = false;
    }
  }
}
