import { ApiClient, SuggestResponse, Suggestion } from './api.js';
import { Typeahead, TypeaheadView } from './typeahead.js';

export interface AppElements {
  input: HTMLInputElement;
  list: HTMLUListElement;
  history: HTMLUListElement;
  banner: HTMLElement;
  debugToggle: HTMLInputElement;
  debugPanel: HTMLElement;
}

function randomUid(): string {
  return `u-${Math.random().toString(36).slice(2, 10)}`;
}

function debugLines(response: SuggestResponse): string {
  const dbg = response.debug;
  if (!dbg || dbg.cosine === null || dbg.alpha_e === null) {
    return 'no drift signals for this variant';
  }
  return response.suggestions
    .map((s, i) => {
      const weights = (dbg.alpha_e![i] ?? []).map((w) => w.toFixed(3)).join(' ');
      return `${s.query}: cosine ${dbg.cosine![i].toFixed(3)}, view weights [${weights}]`;
    })
    .join('\n');
}

/** Wire the typeahead loop onto an existing page; returns the controller. */
export function startApp(
  el: AppElements,
  api: ApiClient,
  uid: string = randomUid(),
): Typeahead {
  const view: TypeaheadView = {
    render(response, forInput) {
      el.list.replaceChildren(
        ...response.suggestions.map((s) => {
          const li = document.createElement('li');
          li.textContent = `${s.query} (${s.score.toFixed(4)})`;
          li.dataset.query = s.query;
          li.addEventListener('click', () => void onClick(s));
          return li;
        }),
      );
      el.list.dataset.forInput = forInput;
      if (el.debugToggle.checked) {
        el.debugPanel.hidden = false;
        el.debugPanel.textContent =
          response.suggestions.length > 0 ? debugLines(response) : '';
      } else {
        el.debugPanel.hidden = true;
      }
    },
    showError(message) {
      el.banner.textContent = message;
      el.banner.hidden = false;
    },
    clearError() {
      el.banner.hidden = true;
    },
  };

  const typeahead = new Typeahead(
    (prefix, k, debug) => api.suggest(uid, prefix, k, debug),
    view,
  );

  const onClick = async (s: Suggestion) => {
    try {
      await api.click(uid, s.query, 'query');
    } catch {
      view.showError('click not recorded');
      return;
    }
    el.input.value = s.query;
    const li = document.createElement('li');
    li.textContent = s.query;
    el.history.append(li);
    // the box now holds the full query; re-suggest against the session
    // that just grew by one click
    typeahead.setInput(s.query);
  };

  el.input.addEventListener('input', () => typeahead.setInput(el.input.value));
  el.debugToggle.addEventListener('change', () => {
    typeahead.debug = el.debugToggle.checked;
    el.debugPanel.hidden = !el.debugToggle.checked;
    typeahead.setInput(el.input.value);
  });
  return typeahead;
}
