/**
 * Session state and the send queue.
 *
 * A session is fully described by (personas, history, seed log): replaying
 * the logged seeds against the same service reproduces every bot turn, so
 * nothing else needs persisting. History alternates user/bot strictly; an
 * exchange whose candidates are still unchosen blocks the queue rather than
 * break the alternation.
 */

import { GenerateRequest, GenerateResponse, ServiceError } from './api.js';

/** The one service call the session depends on; ApiClient satisfies it. */
export interface GenerateClient {
  generate(req: GenerateRequest): Promise<GenerateResponse>;
}

export interface Turn {
  speaker: 'user' | 'bot';
  text: string;
}

/** One request's replay coordinates, recorded per bot turn. */
export interface SeedEntry {
  seed: number;
  n: number;
  sds_on: boolean;
  fds_on: boolean;
}

export interface FailedSend {
  text: string;
  message: string;
}

export class ChatSession {
  personas: string[] = [];
  history: Turn[] = [];
  lastResult: GenerateResponse | null = null;
  chosenIndices: number[] = []; // one per committed bot turn
  seedLog: SeedEntry[] = []; // one per exchange, appended when the reply arrives
  n = 3;
  sdsOn = true;
  fdsOn = true;
  lastError: FailedSend | null = null;

  private queue: string[] = [];
  private busy = false; // request in flight OR candidates awaiting a choice
  private listeners: (() => void)[] = [];

  constructor(private client: GenerateClient) {}

  subscribe(fn: () => void): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  get pendingCount(): number {
    return this.queue.length;
  }

  get awaitingChoice(): boolean {
    return this.lastResult !== null && this.history[this.history.length - 1]?.speaker === 'user';
  }

  setPersonas(lines: string[]): void {
    this.personas = lines.map((s) => s.trim()).filter((s) => s.length > 0);
    this.emit();
  }

  /**
   * Queue a user message. At most one exchange is active at a time; an
   * exchange stays active until its reply arrives and a candidate is chosen.
   */
  send(text: string): Promise<void> {
    const trimmed = text.trim();
    if (!trimmed) return Promise.reject(new Error('empty message'));
    this.queue.push(trimmed);
    this.emit();
    return this.drain();
  }

  private async drain(): Promise<void> {
    if (this.busy) return;
    const text = this.queue.shift();
    if (text === undefined) return;
    this.busy = true;
    this.lastError = null;
    this.emit();
    try {
      const result = await this.client.generate({
        context: [...this.history.map((t) => t.text), text],
        personas: this.personas,
        n: this.n,
        sds_on: this.sdsOn,
        fds_on: this.fdsOn,
      });
      // commit only on success so a failed send leaves the session unchanged
      this.history.push({ speaker: 'user', text });
      this.lastResult = result;
      this.seedLog.push({ seed: result.seed, n: this.n, sds_on: this.sdsOn, fds_on: this.fdsOn });
    } catch (e) {
      this.busy = false;
      this.lastError = {
        text,
        message: e instanceof ServiceError ? e.message : String(e),
      };
      this.emit();
      return;
    }
    this.emit(); // still busy: the human has to pick a candidate
  }

  /** Put a failed message back at the front of the queue and retry. */
  retry(): Promise<void> {
    const failed = this.lastError;
    if (!failed) return Promise.resolve();
    this.lastError = null;
    this.queue.unshift(failed.text);
    this.emit();
    return this.drain();
  }

  /** Commit candidate `index` as the bot turn and release the queue. */
  choose(index: number): Promise<void> {
    const result = this.lastResult;
    if (!result || !this.awaitingChoice) throw new Error('no candidates to choose from');
    if (!Number.isInteger(index) || index < 0 || index >= result.responses.length) {
      throw new Error(`chosen index ${index} out of range [0, ${result.responses.length})`);
    }
    this.history.push({ speaker: 'bot', text: result.responses[index]!.text });
    this.chosenIndices.push(index);
    this.busy = false;
    this.emit();
    return this.drain();
  }
}

export interface ReplayTurn {
  exchange: number;
  seed: number;
  matchedIndex: number;
  response: GenerateResponse;
}

/**
 * Re-issue every exchange of a finished session with its logged seed and
 * check that each recorded bot turn is among the returned candidates.
 * Throws on the first mismatch; a clean pass proves the session is
 * reconstructible from (personas, history, seed log) alone.
 */
export async function replaySession(
  client: GenerateClient,
  personas: string[],
  history: Turn[],
  seedLog: SeedEntry[],
): Promise<ReplayTurn[]> {
  const turns: ReplayTurn[] = [];
  let exchange = 0;
  for (let i = 0; i < history.length; i++) {
    const turn = history[i]!;
    if (turn.speaker !== 'bot') continue;
    const entry = seedLog[exchange];
    if (!entry) throw new Error(`seed log ends before bot turn ${exchange}`);
    const response = await client.generate({
      context: history.slice(0, i).map((t) => t.text),
      personas,
      n: entry.n,
      seed: entry.seed,
      sds_on: entry.sds_on,
      fds_on: entry.fds_on,
    });
    const matchedIndex = response.responses.findIndex((r) => r.text === turn.text);
    if (matchedIndex < 0) {
      throw new Error(`replay mismatch at bot turn ${exchange}: ${JSON.stringify(turn.text)} not among candidates`);
    }
    turns.push({ exchange, seed: entry.seed, matchedIndex, response });
    exchange++;
  }
  return turns;
}
