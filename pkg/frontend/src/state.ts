/** DOM-free chat session state machine.
 *
 * Owns the message thread, sampler-control state, and the client-side
 * serialization rule: one in-flight request per session, later sends queued
 * locally in order.  After every acknowledged exchange the thread is rebuilt
 * from GET /history, so rendered order always equals server order; queued
 * messages appear as trailing "pending" bubbles until acknowledged.
 */

import { ApiError, ChatApi, TurnView } from "./api.js";

export type ConnectionStatus = "idle" | "connecting" | "online" | "offline";

export interface Bubble {
  role: string;
  text: string;
  /** Server turn index, or null for an optimistic (unacknowledged) bubble. */
  turnIndex: number | null;
  pending: boolean;
}

export interface SamplerControls {
  preset: string;
  topP: number;
  temperature: number;
}

/** Client-side mirror of the service's sampler presets (display only; the
 * server owns the actual values, fixed per session at creation). */
export const PRESET_CONTROLS: Record<
  string,
  { topP: number; temperature: number }
> = {
  default: { topP: 1.0, temperature: 1.0 },
  camrest: { topP: 0.2, temperature: 0.7 },
  persuasion: { topP: 0.9, temperature: 0.7 },
};

export function controlsForPreset(preset: string): SamplerControls {
  const values = PRESET_CONTROLS[preset] ?? PRESET_CONTROLS.default;
  return { preset, ...values };
}

const BUSY_RETRY_MS = 150;

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

export class ChatSession {
  sessionId: string | null = null;
  disclosure = "";
  status: ConnectionStatus = "idle";
  bubbles: Bubble[] = [];
  controls: SamplerControls = controlsForPreset("default");
  /** Set when the session's memory is exhausted; the thread is locked. */
  locked = false;
  notice = "";

  private queue: string[] = [];
  private inFlight = false;
  private listeners: Array<() => void> = [];

  constructor(
    private readonly api: ChatApi,
    private readonly retryMs: number = BUSY_RETRY_MS,
  ) {}

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  /** True while the input box should be disabled. */
  get inputDisabled(): boolean {
    return this.sessionId === null || this.locked || this.inFlight;
  }

  /** Start a fresh session; sampler controls apply from here on. */
  async start(preset: string, seed?: number): Promise<void> {
    this.status = "connecting";
    this.notice = "";
    this.emit();
    try {
      const created = await this.api.createSession({ preset, seed });
      this.sessionId = created.id;
      this.disclosure = created.disclosure;
      this.controls = controlsForPreset(created.preset);
      this.locked = false;
      this.queue = [];
      this.bubbles =
        created.opening === null
          ? []
          : [
              {
                role: "system",
                text: created.opening,
                turnIndex: 0,
                pending: false,
              },
            ];
      this.status = "online";
    } catch {
      this.sessionId = null;
      this.status = "offline";
      this.notice = "Service unreachable. Check the API and retry.";
    }
    this.emit();
  }

  canSend(text: string): boolean {
    return this.sessionId !== null && !this.locked && text.trim().length > 0;
  }

  /** Queue a user message; an optimistic bubble renders immediately. */
  send(text: string): void {
    if (!this.canSend(text)) return;
    this.bubbles.push({ role: "user", text, turnIndex: null, pending: true });
    this.queue.push(text);
    this.emit();
    void this.pump();
  }

  /** Drain the local queue one request at a time, in order. */
  private async pump(): Promise<void> {
    if (this.inFlight) return;
    this.inFlight = true;
    this.emit();
    try {
      while (this.queue.length > 0 && this.locked === false) {
        const text = this.queue[0];
        try {
          await this.api.sendMessage(this.sessionId!, text);
          this.queue.shift();
        } catch (error) {
          if (error instanceof ApiError && error.isBusy) {
            await sleep(this.retryMs); // another reply in flight: retry
            continue;
          }
          if (error instanceof ApiError && error.isFull) {
            this.lockThread();
            break;
          }
          this.status = "offline";
          this.notice = "Connection lost; message not delivered.";
          this.queue = [];
          this.bubbles = this.bubbles.filter((b) => !b.pending);
          break;
        }
        await this.refreshHistory();
      }
    } finally {
      this.inFlight = false;
      this.emit();
    }
  }

  private lockThread(): void {
    this.locked = true;
    this.queue = [];
    this.bubbles = this.bubbles.filter((b) => !b.pending);
    this.notice = "This conversation is full. Start a new session.";
  }

  /** Rebuild the thread from the server log (the source of truth). */
  async refreshHistory(): Promise<void> {
    if (this.sessionId === null) return;
    const history = await this.api.history(this.sessionId);
    const acked: Bubble[] = history.turns.map((turn: TurnView) => ({
      role: turn.role,
      text: turn.text,
      turnIndex: turn.index,
      pending: false,
    }));
    // queued-but-unacknowledged user bubbles trail the server history
    const stillQueued = new Set(this.queue);
    const trailing = this.bubbles.filter(
      (b) => b.pending && stillQueued.has(b.text),
    );
    this.bubbles = [...acked, ...trailing];
    if (history.full) this.lockThread();
    this.emit();
  }

  /** Transcript JSONL exactly as the service serialized it. */
  async exportTranscript(): Promise<string> {
    if (this.sessionId === null) throw new Error("no active session");
    return this.api.exportTranscript(this.sessionId);
  }
}
