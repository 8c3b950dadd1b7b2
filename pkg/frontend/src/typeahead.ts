import type { SuggestResponse } from './api.js';

const EMPTY: SuggestResponse = { suggestions: [] };

export interface TypeaheadView {
  /** Replace the rendered list; order must be preserved exactly. */
  render(response: SuggestResponse, forInput: string): void;
  showError(message: string): void;
  clearError(): void;
}

export interface TypeaheadOptions {
  debounceMs?: number;
  k?: number;
  debug?: boolean;
}

type SuggestFn = (prefix: string, k: number, debug: boolean) => Promise<SuggestResponse>;

/**
 * Keystroke-to-rendered-list state machine.
 *
 * Each issued request is tagged with the input it answers and a monotone
 * sequence number. A response renders only if its input still matches the
 * box and no newer response has rendered, so fast typing ends with exactly
 * the final prefix's list and out-of-order arrivals are dropped.
 */
export class Typeahead {
  private timer: ReturnType<typeof setTimeout> | null = null;
  private seq = 0;
  private renderedSeq = 0;
  private currentInput = '';
  debug: boolean;
  private readonly debounceMs: number;
  private readonly k: number;

  constructor(
    private readonly suggest: SuggestFn,
    private readonly view: TypeaheadView,
    opts: TypeaheadOptions = {},
  ) {
    this.debounceMs = opts.debounceMs ?? 80;
    this.k = opts.k ?? 5;
    this.debug = opts.debug ?? false;
  }

  /** Call on every keystroke with the full box content. */
  setInput(text: string): void {
    this.currentInput = text;
    if (this.timer) clearTimeout(this.timer);
    this.timer = null;
    if (text === '') {
      // no request for an empty box; the stale-input guard in request()
      // already drops any in-flight response for earlier text
      this.view.render(EMPTY, '');
      this.renderedSeq = this.seq;
      return;
    }
    this.timer = setTimeout(() => {
      this.timer = null;
      void this.request(text);
    }, this.debounceMs);
  }

  private async request(input: string): Promise<void> {
    const tag = ++this.seq;
    let response: SuggestResponse;
    try {
      response = await this.suggest(input, this.k, this.debug);
    } catch {
      if (input === this.currentInput) this.view.showError('suggestions unavailable');
      return;
    }
    if (input !== this.currentInput || tag <= this.renderedSeq) return;
    this.renderedSeq = tag;
    this.view.clearError();
    this.view.render(response, input);
  }

  dispose(): void {
    if (this.timer) clearTimeout(this.timer);
    this.timer = null;
  }
}
