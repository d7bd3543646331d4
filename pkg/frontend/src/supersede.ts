/** Request supersession: at most one request in flight plus one queued.
 *
 * Submissions get monotonically increasing ids. While a request is in
 * flight, newer submissions replace the single queued slot (latest wins).
 * Results are delivered only when no newer submission exists, so the
 * consumer never observes a response older than the displayed one.
 */
export class RequestGate<T> {
  private nextId = 0;
  private running: number | null = null;
  private queued: { id: number; task: () => Promise<T> } | null = null;
  private delivered = -1;

  constructor(
    private readonly deliver: (value: T, id: number) => void,
    private readonly onError: (err: unknown, id: number) => void = () => {},
  ) {}

  /** Number of ids handed out so far (for instrumentation). */
  get submitted(): number {
    return this.nextId;
  }

  get inFlight(): boolean {
    return this.running !== null;
  }

  get hasQueued(): boolean {
    return this.queued !== null;
  }

  submit(task: () => Promise<T>): number {
    const id = this.nextId++;
    if (this.running !== null) {
      this.queued = { id, task }; // replace any older queued request
      return id;
    }
    this.launch(id, task);
    return id;
  }

  private launch(id: number, task: () => Promise<T>): void {
    this.running = id;
    task().then(
      (value) => this.settle(id, () => {
        if (id > this.delivered && this.isLatest(id)) {
          this.delivered = id;
          this.deliver(value, id);
        }
      }),
      (err) => this.settle(id, () => this.onError(err, id)),
    );
  }

  private isLatest(id: number): boolean {
    return this.queued === null && id === this.nextId - 1;
  }

  private settle(id: number, emit: () => void): void {
    this.running = null;
    emit();
    if (this.queued !== null) {
      const next = this.queued;
      this.queued = null;
      this.launch(next.id, next.task);
    }
  }
}

export interface Debounced<A extends unknown[]> {
  (...args: A): void;
  cancel(): void;
  flush(): void;
}

/** Trailing-edge debounce; the default 120 ms matches slider scrub latency. */
export function debounce<A extends unknown[]>(
  fn: (...args: A) => void,
  waitMs = 120,
  timers: { set: typeof setTimeout; clear: typeof clearTimeout } = {
    set: setTimeout,
    clear: clearTimeout,
  },
): Debounced<A> {
  let handle: ReturnType<typeof setTimeout> | null = null;
  let pending: A | null = null;
  const debounced = (...args: A) => {
    pending = args;
    if (handle !== null) timers.clear(handle);
    handle = timers.set(() => {
      handle = null;
      const run = pending as A;
      pending = null;
      fn(...run);
    }, waitMs);
  };
  debounced.cancel = () => {
    if (handle !== null) timers.clear(handle);
    handle = null;
    pending = null;
  };
  debounced.flush = () => {
    if (handle !== null) {
      timers.clear(handle);
      handle = null;
      const run = pending as A;
      pending = null;
      fn(...run);
    }
  };
  return debounced;
}
