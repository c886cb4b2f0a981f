import logging

log_format = u'%(levelname)-8s [%(asctime)s]  %(message)s'


class PipelineLogger(object):
    """ Logs with now time and join all input parameters"""

    def __init__(self, name='discovery', level=logging.INFO):
        self._logger = logging.getLogger(name)
        self._logger.setLevel(level)

    @staticmethod
    def configure(filename=None, level=logging.INFO):
        # one sink for the whole process; stderr unless a file is given
        root = logging.getLogger()
        for handler in list(root.handlers):
            root.removeHandler(handler)
        logging.basicConfig(filename=filename, format=log_format, level=level)

    @staticmethod
    def _join_args(*args):
        tmp_list = []
        tmp_list.extend(args)
        return ' '.join(map(str, tmp_list))

    def log_stage(self, stage, **fields):
        parts = ['{0}={1}'.format(key, fields[key]) for key in fields]
        self.info('Stage', stage, *parts)

    def log_epoch(self, epoch, row):
        self.info('Epoch', epoch,
                  'L_mask, L_object, L_hier, total:',
                  row['L_mask'], row['L_object'], row['L_hier'], row['total'])

    def log_written(self, path):
        self.info('Written:', path)

    def info(self, *args):
        try:
            self._logger.info(self._join_args(*args))
        except Exception:
            pass

    def warning(self, *args):
        try:
            self._logger.warning(self._join_args(*args))
        except Exception:
            pass

    def error(self, *args):
        try:
            self._logger.error(self._join_args(*args))
        except Exception:
            pass
