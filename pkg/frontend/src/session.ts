import { ApiClient } from "./api.js";
import { Anchor, ControlRequest, ControlResponse, ServiceError } from "./types.js";

export const DEBOUNCE_MS = 250;

export interface SessionSettings {
  b: number;
  gamma: number;
  beam: number;
}

export type SessionListener = (session: ExplorerSession) => void;

/**
 * Holds the explorer's state: the chosen anchor and dimension, the last
 * trajectory, and the slider value. Commits are debounced so a burst of
 * slider movements issues a single request, and a newer commit aborts any
 * request still in flight (latest wins).
 */
export class ExplorerSession {
  anchor: Anchor | null = null;
  dim = 0;
  sliderValue: number | null = null;
  settings: SessionSettings = { b: 8, gamma: 1.0, beam: 8 };

  trajectory: ControlResponse | null = null;
  stale = false;
  error: ServiceError | null = null;
  requestsIssued = 0;

  private timer: ReturnType<typeof setTimeout> | null = null;
  private inflight: AbortController | null = null;
  private listeners: SessionListener[] = [];

  constructor(private api: ApiClient) {}

  onChange(fn: SessionListener): void {
    this.listeners.push(fn);
  }

  private notify(): void {
    for (const fn of this.listeners) fn(this);
  }

  get range(): [number, number] | null {
    return this.trajectory ? this.trajectory.range : null;
  }

  selectAnchor(anchor: Anchor): void {
    this.anchor = anchor;
    this.trajectory = null;
    this.sliderValue = null;
    this.notify();
  }

  selectDim(dim: number): void {
    this.dim = dim;
    this.trajectory = null;
    this.sliderValue = null;
    this.notify();
  }

  /** Commit a slider position; debounced, one request per commit window. */
  commit(value: number | null): void {
    this.sliderValue = value;
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      void this.fire();
    }, DEBOUNCE_MS);
    this.notify();
  }

  /** Issue the request immediately (used for the initial probe). */
  async fire(): Promise<void> {
    if (this.anchor === null) return;
    if (this.inflight !== null) this.inflight.abort(); // latest wins
    const controller = new AbortController();
    this.inflight = controller;

    const req: ControlRequest = {
      ...this.anchor,
      dim: this.dim,
      b: this.settings.b,
      gamma: this.settings.gamma,
      beam: this.settings.beam,
    };
    if (this.sliderValue !== null) req.value = this.sliderValue;

    this.requestsIssued += 1;
    try {
      const traj = await this.api.control(req, controller.signal);
      if (this.inflight !== controller) return; // superseded
      this.trajectory = traj;
      this.stale = false;
      this.error = null;
    } catch (err) {
      if (controller.signal.aborted) return; // cancelled by a newer commit
      if (this.inflight !== controller) return;
      this.error = err instanceof ServiceError
        ? err
        : new ServiceError(0, String(err));
      this.stale = this.trajectory !== null; // keep showing the old result
    } finally {
      if (this.inflight === controller) this.inflight = null;
      this.notify();
    }
  }

  /** True while a debounce window or request is pending. */
  get busy(): boolean {
    return this.timer !== null || this.inflight !== null;
  }
}
